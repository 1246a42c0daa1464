//! The frozen segmentation oracle: a plain stack of same-padded convolutions.
//!
//! Weights files (`KCO1`) are laid out as
//!
//! ```text
//! "KCO1" | u32 LE descriptor length | JSON descriptor | KCT1 blob ...
//! ```
//!
//! The descriptor lists the architecture and, for every tensor, its byte
//! offset and length relative to the first blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::segmentation::{seg_losses, LabelMap};
use crate::tensor::io::{self as kct, Reader};
use crate::tensor::{Tape, Tensor, Var};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"KCO1";

/// Seeds of the two shipped oracle presets.
pub const ORACLE_A_SEED: u64 = 0x0A_5EED;
pub const ORACLE_B_SEED: u64 = 0x0B_5EED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// `C→16→16→16→K` with 3×3 kernels and ReLU between layers.
    pub fn default_for(in_channels: usize, num_classes: usize) -> Self {
        Self::stack(&[in_channels, 16, 16, 16, num_classes], 3)
    }

    /// Chain of `widths.len() - 1` convolutions, ReLU on all but the last.
    pub fn stack(widths: &[usize], kernel: usize) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| LayerSpec {
                in_channels: widths[i],
                out_channels: widths[i + 1],
                kernel,
                activation: if i + 1 < n { Activation::Relu } else { Activation::None },
            })
            .collect();
        Architecture { layers }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::invalid("Architecture", "no layers"))?;
        if first.in_channels == 0 {
            return Err(Error::invalid("Architecture", "zero input channels"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.out_channels == 0 {
                return Err(Error::invalid(
                    "Architecture",
                    format!("layer {i}: kernel {} must be odd, out {} positive", l.kernel, l.out_channels),
                ));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.in_channels != l.out_channels {
                    return Err(Error::invalid(
                        "Architecture",
                        format!("layer {} expects {} channels, layer {i} gives {}", i + 1, next.in_channels, l.out_channels),
                    ));
                }
            }
        }
        if self.num_classes() < 2 {
            return Err(Error::invalid("Architecture", "need at least two output classes"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleNet {
    id: String,
    arch: Architecture,
    layers: Vec<ConvLayer>,
    frozen: bool,
}

/// Parameter handles recorded on a tape by [`OracleNet::record`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl OracleNet {
    /// He-initialised network drawn from `seed`; unfrozen.
    pub fn random(id: impl Into<String>, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers
            .iter()
            .map(|&spec| {
                let fan_in = spec.in_channels * spec.kernel * spec.kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
                let n = shape.iter().product();
                let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
                ConvLayer {
                    spec,
                    weight: Tensor::from_parts(shape.to_vec(), w),
                    bias: Tensor::zeros(&[spec.out_channels]),
                }
            })
            .collect();
        Ok(OracleNet {
            id: id.into(),
            arch,
            layers,
            frozen: false,
        })
    }

    /// The shipped presets `oracle-A` and `oracle-B` (default architecture).
    pub fn preset(name: &str, in_channels: usize, num_classes: usize) -> Result<Self> {
        let seed = match name {
            "oracle-A" => ORACLE_A_SEED,
            "oracle-B" => ORACLE_B_SEED,
            other => return Err(Error::invalid("OracleNet::preset", format!("unknown preset {other:?}"))),
        };
        Self::random(name, Architecture::default_for(in_channels, num_classes), seed)
    }

    /// Builds a network from explicit weights, checking every shape.
    pub fn from_layers(id: impl Into<String>, layers: Vec<ConvLayer>) -> Result<Self> {
        let arch = Architecture {
            layers: layers.iter().map(|l| l.spec).collect(),
        };
        arch.validate()?;
        for (i, l) in layers.iter().enumerate() {
            let s = l.spec;
            let ws = [s.out_channels, s.in_channels, s.kernel, s.kernel];
            if l.weight.shape() != ws || l.bias.shape() != [s.out_channels] {
                return Err(Error::invalid(
                    "OracleNet::from_layers",
                    format!("layer {i}: weight {:?} / bias {:?} do not match {ws:?}", l.weight.shape(), l.bias.shape()),
                ));
            }
        }
        Ok(OracleNet {
            id: id.into(),
            arch,
            layers,
            frozen: false,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.arch.in_channels()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable parameters `(weight, bias)` per layer; refused once frozen.
    pub fn parameters_mut(&mut self) -> Result<Vec<(&mut Tensor, &mut Tensor)>> {
        if self.frozen {
            return Err(Error::invalid("parameters_mut", "oracle is frozen"));
        }
        Ok(self.layers.iter_mut().map(|l| (&mut l.weight, &mut l.bias)).collect())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 3 || x.shape()[0] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "oracle forward",
                left: x.shape().to_vec(),
                right: vec![self.in_channels()],
            });
        }
        Ok(())
    }

    /// Untracked forward pass: `C×H×W` image to `K×H×W` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.conv2d(&self.layers[0].weight, &self.layers[0].bias)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.conv2d(&layer.weight, &layer.bias)?;
            }
            if layer.spec.activation == Activation::Relu {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`. Parameters become leaves when
    /// `trainable`, constants otherwise.
    pub fn record(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, ParamVars)> {
        self.check_input(tape.value(x)?)?;
        let mut params = ParamVars {
            weights: Vec::with_capacity(self.layers.len()),
            biases: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x;
        for layer in &self.layers {
            let (w, b) = if trainable {
                (tape.leaf(layer.weight.clone()), tape.leaf(layer.bias.clone()))
            } else {
                (tape.constant(layer.weight.clone()), tape.constant(layer.bias.clone()))
            };
            params.weights.push(w);
            params.biases.push(b);
            h = tape.conv2d(h, w, b)?;
            if layer.spec.activation == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok((h, params))
    }

    /// Loss `λ_ce·CE + λ_dice·Dice` at `x` and its gradient with respect to
    /// the input. Requires a frozen oracle.
    pub fn input_gradient(&self, x: &Tensor, y: &LabelMap, lambda_ce: f64, lambda_dice: f64) -> Result<(f64, Tensor)> {
        if !self.frozen {
            return Err(Error::NotFrozen);
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (logits, _) = self.record(&mut tape, xv, false)?;
        let (ce, dice) = seg_losses(&mut tape, logits, y)?;
        let a = tape.scalar_mul(ce, lambda_ce)?;
        let b = tape.scalar_mul(dice, lambda_dice)?;
        let loss = tape.add(a, b)?;
        let value = tape.value(loss)?.item()?;
        let grad = tape.backward(loss)?.wrt(xv)?;
        Ok((value, grad))
    }

    /// SHA-256 over the architecture and every weight, hex encoded.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("architecture serializes"));
        for l in &self.layers {
            h.update(kct::to_bytes(&l.weight));
            h.update(kct::to_bytes(&l.bias));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut tensors = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (kind, t) in [("weight", &l.weight), ("bias", &l.bias)] {
                let offset = blobs.len();
                kct::encode(t, &mut blobs);
                tensors.push(TensorEntry {
                    name: format!("layer{i}.{kind}"),
                    offset,
                    length: blobs.len() - offset,
                });
            }
        }
        let desc = Descriptor {
            id: self.id.clone(),
            num_classes: self.num_classes(),
            layers: self.arch.layers.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&desc).expect("descriptor serializes");
        let mut out = Vec::with_capacity(8 + json.len() + blobs.len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    /// Parses a weights file. The result is frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const F: &str = "KCO1";
        let mut r = Reader::new(bytes, 0, F);
        r.magic(WEIGHTS_MAGIC)?;
        let json_len = r.u32("descriptor length")? as usize;
        let json_at = r.offset();
        let json = r.take(json_len, "descriptor")?;
        let desc: Descriptor =
            serde_json::from_slice(json).map_err(|e| Error::format(F, json_at, format!("descriptor: {e}")))?;
        if desc.tensors.len() != 2 * desc.layers.len() {
            return Err(Error::format(
                F,
                json_at,
                format!("descriptor lists {} tensors for {} layers", desc.tensors.len(), desc.layers.len()),
            ));
        }
        let blob_base = r.offset();
        let blobs = &bytes[blob_base..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(desc.tensors.len());
        for entry in &desc.tensors {
            if entry.offset != expected_offset || entry.offset + entry.length > blobs.len() {
                return Err(Error::format(
                    F,
                    blob_base + entry.offset.min(blobs.len()),
                    format!("tensor {} at offset {} (+{}) does not fit the file", entry.name, entry.offset, entry.length),
                ));
            }
            let slice = &blobs[entry.offset..entry.offset + entry.length];
            let mut br = Reader::new(slice, blob_base + entry.offset, F);
            let t = kct::decode_from(&mut br)?;
            br.finish()?;
            tensors.push(t);
            expected_offset = entry.offset + entry.length;
        }
        if expected_offset != blobs.len() {
            return Err(Error::format(F, blob_base + expected_offset, "trailing bytes after last tensor"));
        }
        let mut it = tensors.into_iter();
        let layers = desc
            .layers
            .iter()
            .map(|&spec| ConvLayer {
                spec,
                weight: it.next().expect("count checked"),
                bias: it.next().expect("count checked"),
            })
            .collect();
        let net = OracleNet::from_layers(desc.id, layers)
            .map_err(|e| Error::format(F, json_at, format!("inconsistent descriptor: {e}")))?;
        if net.num_classes() != desc.num_classes {
            return Err(Error::format(F, json_at, "num_classes disagrees with final layer"));
        }
        Ok(net.frozen())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and rejects files whose architecture differs from `expected`.
    pub fn load_checked(path: impl AsRef<Path>, expected: &Architecture) -> Result<Self> {
        let net = Self::load(path)?;
        if &net.arch != expected {
            return Err(Error::Data(format!(
                "weights architecture {:?} does not match the configured one",
                net.arch.layers.iter().map(|l| l.out_channels).collect::<Vec<_>>()
            )));
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    id: String,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
}
