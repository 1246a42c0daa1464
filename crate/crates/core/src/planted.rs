//! Small instances with a known most-vulnerable token.
//!
//! The oracle is a single 1×1 convolution with two classes whose decision
//! threshold sits at intensity 0.5. Every pixel is correctly classified; its
//! distance from the threshold is its margin. Pixels in the planted token all
//! lie on the foreground side within the attack budget, so a uniform shift
//! of that token flips all of them. Other tokens carry a few such pixels or
//! none, and everything else sits far from the threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::{Activation, ConvLayer, LayerSpec, OracleNet};
use crate::segmentation::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub grid: usize,
    pub token_size: usize,
    /// Logit gain of the oracle around its threshold.
    pub gain: f64,
    /// Margin range of pixels that a budget-sized shift can flip.
    pub near_margin: (f64, f64),
    pub far_margin: (f64, f64),
    /// Upper bound on the number of flippable pixels in an ordinary token.
    pub max_decoy_pixels: usize,
    /// Chance that an ordinary token carries any flippable pixels.
    pub decoy_rate: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            grid: 4,
            token_size: 4,
            gain: 20.0,
            near_margin: (0.005, 0.04),
            far_margin: (0.15, 0.4),
            max_decoy_pixels: 6,
            decoy_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedInstance {
    pub image: Tensor,
    pub labels: LabelMap,
    pub oracle: OracleNet,
    pub token_size: usize,
    pub grid: usize,
    /// `(row, col)` of the planted token.
    pub planted: (usize, usize),
}

impl PlantedInstance {
    pub fn generate(seed: u64) -> Self {
        Self::with_config(seed, &PlantedConfig::default())
    }

    pub fn with_config(seed: u64, cfg: &PlantedConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, t) = (cfg.grid, cfg.token_size);
        let side = g * t;
        let planted = (rng.random_range(0..g), rng.random_range(0..g));
        let mut image = vec![0.0; side * side];
        let mut labels = vec![0u8; side * side];
        for ty in 0..g {
            for tx in 0..g {
                let pixels: Vec<usize> = (0..t * t).map(|i| (ty * t + i / t) * side + tx * t + i % t).collect();
                let near = if (ty, tx) == planted {
                    t * t
                } else if rng.random_bool(cfg.decoy_rate) {
                    rng.random_range(1..=cfg.max_decoy_pixels.min(t * t))
                } else {
                    0
                };
                let mut order = pixels.clone();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                for (rank, &p) in order.iter().enumerate() {
                    let (fg, margin) = if rank < near {
                        (true, rng.random_range(cfg.near_margin.0..cfg.near_margin.1))
                    } else {
                        (rng.random_bool(0.5), rng.random_range(cfg.far_margin.0..cfg.far_margin.1))
                    };
                    labels[p] = fg as u8;
                    image[p] = if fg { 0.5 + margin } else { 0.5 - margin };
                }
            }
        }
        PlantedInstance {
            image: Tensor::new(&[1, side, side], image).expect("generated image is well formed"),
            labels: LabelMap::new(side, side, labels).expect("generated labels are well formed"),
            oracle: threshold_oracle(cfg.gain),
            token_size: t,
            grid: g,
            planted,
        }
    }

    /// Row-major token index of the planted token.
    pub fn planted_index(&self) -> usize {
        self.planted.0 * self.grid + self.planted.1
    }
}

/// Frozen two-class oracle with logit difference `2·gain·(x − 0.5)`.
pub fn threshold_oracle(gain: f64) -> OracleNet {
    let spec = LayerSpec {
        in_channels: 1,
        out_channels: 2,
        kernel: 1,
        activation: Activation::None,
    };
    let layer = ConvLayer {
        spec,
        weight: Tensor::new(&[2, 1, 1, 1], vec![-gain, gain]).expect("static shape"),
        bias: Tensor::new(&[2], vec![gain / 2.0, -gain / 2.0]).expect("static shape"),
    };
    OracleNet::from_layers("planted-threshold", vec![layer])
        .expect("single-layer chain is valid")
        .frozen()
}
