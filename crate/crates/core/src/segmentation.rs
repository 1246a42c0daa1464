//! Integer label grids and the segmentation losses used by the oracle and
//! by training.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Smoothing constant of the soft-Dice loss; keeps empty classes finite.
pub const DICE_SMOOTH: f64 = 1.0;

/// Row-major `H×W` grid of class indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(
                "LabelMap::new",
                format!("{height}×{width} grid with {} labels", data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(Error::LabelOutOfRange {
                label: l as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// `K×H×W` indicator tensor.
    pub fn one_hot(&self, num_classes: usize) -> Result<Tensor> {
        self.check_classes(num_classes)?;
        let n = self.data.len();
        let mut d = vec![0.0; num_classes * n];
        for (p, &l) in self.data.iter().enumerate() {
            d[l as usize * n + p] = 1.0;
        }
        Ok(Tensor::from_parts(vec![num_classes, self.height, self.width], d))
    }

    /// Per-pixel argmax over the class axis of `K×H×W` logits; ties go to the
    /// lower class index.
    pub fn argmax(logits: &Tensor) -> Result<Self> {
        if logits.rank() != 3 || logits.shape()[0] > 256 {
            return Err(Error::invalid("argmax", format!("expected K×H×W logits, got {:?}", logits.shape())));
        }
        let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let n = h * w;
        let d = logits.data();
        let data = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * n + p] > d[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Ok(LabelMap { height: h, width: w, data })
    }
}

/// Records cross-entropy and soft-Dice of `logits` against hard labels.
pub fn seg_losses(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<(Var, Var)> {
    let k = tape.value(logits)?.shape().first().copied().unwrap_or(0);
    let target = labels.one_hot(k)?;
    seg_losses_soft(tape, logits, &target)
}

/// Same as [`seg_losses`] against a per-pixel class distribution.
pub fn seg_losses_soft(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<(Var, Var)> {
    let ce = tape.cross_entropy(logits, target)?;
    let dice = tape.soft_dice(logits, target, DICE_SMOOTH)?;
    Ok((ce, dice))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_label_is_rejected() {
        let y = LabelMap::new(1, 3, vec![0, 2, 1]).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 1, 3]));
        assert!(matches!(
            seg_losses(&mut tape, z, &y),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let z = Tensor::new(&[2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 0.5, 3.0]).unwrap();
        assert_eq!(LabelMap::argmax(&z).unwrap().data(), &[0, 0, 1]);
    }

    #[test]
    fn one_hot_layout() {
        let y = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        assert_eq!(y.one_hot(2).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
