//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::synth::SyntheticTask;
use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::keep::KeepConfig;
use crate::oracle::{Architecture, OracleNet};
use crate::sage::SageConfig;

/// Which network to build or load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// `oracle-A` or `oracle-B`; names the initialisation stream.
    pub preset: String,
    /// Hidden widths; the default stack is three layers of 16.
    pub hidden: Vec<usize>,
    pub kernel: usize,
    /// Trained weights, for commands that consume an oracle.
    pub weights: Option<PathBuf>,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            preset: "oracle-A".into(),
            hidden: vec![16, 16, 16],
            kernel: 3,
            weights: None,
        }
    }
}

impl OracleSection {
    pub fn architecture(&self, in_channels: usize, num_classes: usize) -> Architecture {
        let mut widths = vec![in_channels];
        widths.extend(&self.hidden);
        widths.push(num_classes);
        Architecture::stack(&widths, self.kernel)
    }

    /// Fresh network for training, seeded by the preset and `seed`.
    pub fn init(&self, in_channels: usize, num_classes: usize, seed: u64) -> Result<OracleNet> {
        let base = OracleNet::preset(&self.preset, in_channels, num_classes)?;
        let arch = self.architecture(in_channels, num_classes);
        let s = derive_seed(seed, &["init", base.id()]);
        OracleNet::random(self.preset.clone(), arch, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Training Dice the oracle must reach to count as converged.
    pub dice_gate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            val_fraction: 0.2,
            test_fraction: 0.2,
            dice_gate: 0.85,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("TrainingConfig", msg));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        let fractions = self.val_fraction + self.test_fraction;
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && fractions < 1.0) {
            return bad("val and test fractions must be non-negative and leave training data".into());
        }
        if !(0.0..=1.0).contains(&self.dice_gate) {
            return bad(format!("dice_gate {} outside [0, 1]", self.dice_gate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every stream seed below is derived from this one.
    pub seed: u64,
    pub synth: SyntheticTask,
    pub oracle: OracleSection,
    pub sage: SageConfig,
    pub keep: KeepConfig,
    pub augment: AugmentSpec,
    pub training: TrainingConfig,
    pub outputs: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            synth: SyntheticTask::default(),
            oracle: OracleSection::default(),
            sage: SageConfig::default(),
            keep: KeepConfig::default(),
            augment: AugmentSpec::Identity,
            training: TrainingConfig::default(),
            outputs: PathBuf::from("out"),
        };
        cfg.reseed(0);
        cfg
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.reseed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Sets the top-level seed and every section seed derived from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = derive_seed(seed, &["synth"]);
        self.sage.seed = derive_seed(seed, &["sage"]);
        self.keep.seed = derive_seed(seed, &["keep"]);
        self.training.seed = derive_seed(seed, &["training"]);
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.sage.validate()?;
        self.keep.validate()?;
        self.augment.validate()?;
        self.training.validate()?;
        self.oracle.init(1, 2, 0).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.training.epochs, c.training.batch, c.training.lr), (50, 16, 1e-3));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn json_sections_and_seed_derivation() {
        let c = RunConfig::from_json(r#"{"seed": 7, "augment": {"kind": "gaussian_noise"}, "sage": {"epsilon": 0.02}}"#).unwrap();
        assert_eq!(c.sage.epsilon, 0.02);
        assert_eq!(c.augment, AugmentSpec::gaussian_noise());
        assert_eq!(c.sage.seed, derive_seed(7, &["sage"]));
        assert_ne!(c.training.seed, RunConfig::default().training.seed);
        assert!(RunConfig::from_json(r#"{"sage": {"epsilonn": 1}}"#).is_err());
    }

    #[test]
    fn invalid_sections_rejected() {
        let mut c = RunConfig::default();
        c.training.val_fraction = 0.6;
        c.training.test_fraction = 0.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.oracle.preset = "oracle-Z".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn presets_initialise_differently() {
        let a = OracleSection::default().init(1, 2, 3).unwrap();
        let b = OracleSection {
            preset: "oracle-B".into(),
            ..OracleSection::default()
        }
        .init(1, 2, 3)
        .unwrap();
        assert_ne!(a.weights_hash(), b.weights_hash());
        assert_eq!(a, OracleSection::default().init(1, 2, 3).unwrap());
    }
}
