//! Dense row-major `f64` tensors of rank at most four.
//!
//! Operations here are untracked. [`Tape`] records the same operations when
//! gradients are needed.

mod adam;
mod conv;
pub mod io;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.len() > MAX_RANK {
        return Err(Error::invalid(op, format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(op, format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, validating extents, length and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape("Tensor::new", shape)?;
        if len != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("shape {shape:?} needs {len} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for results whose shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; len])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the payload. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            )),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape("reshape", shape)?;
        if len != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::checked(op, self.shape.clone(), data)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scalar_mul(&self, s: f64) -> Result<Tensor> {
        Tensor::checked("scalar_mul", self.shape.clone(), self.data.iter().map(|v| v * s).collect())
    }

    pub fn scalar_add(&self, s: f64) -> Result<Tensor> {
        Tensor::checked("scalar_add", self.shape.clone(), self.data.iter().map(|v| v + s).collect())
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        check_interval("clamp", lo, hi)?;
        Ok(self.map(|v| v.clamp(lo, hi)))
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Same-padded, stride-1 cross-correlation of a `C×H×W` input with an
    /// `O×C×k×k` kernel bank plus per-output bias.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let g = conv::ConvGeometry::new(self, weight, bias)?;
        let mut out = vec![0.0; g.out_channels * g.height * g.width];
        conv::forward(&g, &self.data, &weight.data, &bias.data, &mut out);
        Tensor::checked("conv2d", vec![g.out_channels, g.height, g.width], out)
    }

    /// Replicates each element of the two trailing axes into a
    /// `factor_h × factor_w` block.
    pub fn upsample_nearest(&self, factor_h: usize, factor_w: usize) -> Result<Tensor> {
        let (lead, h, w) = trailing_plane("upsample_nearest", &self.shape)?;
        if factor_h == 0 || factor_w == 0 {
            return Err(Error::invalid("upsample_nearest", "factors must be at least 1"));
        }
        let (oh, ow) = (h * factor_h, w * factor_w);
        let mut out = Vec::with_capacity(lead * oh * ow);
        for plane in self.data.chunks_exact(h * w) {
            for oy in 0..oh {
                let row = &plane[(oy / factor_h) * w..(oy / factor_h + 1) * w];
                out.extend((0..ow).map(|ox| row[ox / factor_w]));
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Sums each `factor_h × factor_w` block of the two trailing axes.
    pub fn block_sum(&self, factor_h: usize, factor_w: usize) -> Result<Tensor> {
        let (lead, h, w) = trailing_plane("block_sum", &self.shape)?;
        if factor_h == 0 || factor_w == 0 || h % factor_h != 0 || w % factor_w != 0 {
            return Err(Error::invalid(
                "block_sum",
                format!("{h}×{w} plane not divisible into {factor_h}×{factor_w} blocks"),
            ));
        }
        let (ch, cw) = (h / factor_h, w / factor_w);
        let mut out = vec![0.0; lead * ch * cw];
        for (plane, coarse) in self.data.chunks_exact(h * w).zip(out.chunks_exact_mut(ch * cw)) {
            for y in 0..h {
                let dst = &mut coarse[(y / factor_h) * cw..(y / factor_h + 1) * cw];
                for (x, v) in plane[y * w..(y + 1) * w].iter().enumerate() {
                    dst[x / factor_w] += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = ch;
        shape[r - 1] = cw;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Mean over each block; the left inverse of [`Tensor::upsample_nearest`].
    pub fn block_mean(&self, factor_h: usize, factor_w: usize) -> Result<Tensor> {
        let s = self.block_sum(factor_h, factor_w)?;
        s.scalar_mul(1.0 / (factor_h * factor_w) as f64)
    }

    /// Stacks `channels` copies of an `H×W` plane into `C×H×W`.
    pub fn repeat_channels(&self, channels: usize) -> Result<Tensor> {
        if self.rank() != 2 || channels == 0 {
            return Err(Error::invalid(
                "repeat_channels",
                format!("expected a rank-2 plane and channels ≥ 1, got {:?}", self.shape),
            ));
        }
        let data = self.data.repeat(channels);
        Ok(Tensor::from_parts(vec![channels, self.shape[0], self.shape[1]], data))
    }
}

pub(crate) fn check_interval(op: &'static str, lo: f64, hi: f64) -> Result<()> {
    if lo < hi {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("empty interval [{lo}, {hi}]")))
    }
}

/// Splits a shape into (leading element count, H, W).
fn trailing_plane(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(op, format!("need at least rank 2, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// Logistic function, evaluated without overflow for large |v|.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_definitions() {
        assert_eq!(t(&[2], &[1.0, 2.0]).mul(&t(&[2], &[3.0, 4.0])).unwrap().data(), &[3.0, 8.0]);
        let x = t(&[3], &[0.3, -1.7, 2.25]);
        assert_eq!(x.add(&Tensor::zeros_like(&x)).unwrap(), x);
        assert_eq!(t(&[2], &[0.5, -0.5]).scalar_mul(2.0).unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0, 2.0, 3.0])).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(matches!(Tensor::new(&[1], vec![f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0).is_finite());
    }

    #[test]
    fn clamp_and_relu() {
        let x = t(&[3], &[-0.2, 0.5, 1.3]);
        assert_eq!(x.clamp(0.0, 1.0).unwrap().data(), &[0.0, 0.5, 1.0]);
        let inside = t(&[3], &[0.0, 0.25, 1.0]);
        assert_eq!(inside.clamp(0.0, 1.0).unwrap(), inside);
        assert!(x.clamp(1.0, 1.0).is_err());
        assert!(x.clamp(2.0, 1.0).is_err());

        let r = t(&[3], &[-1.0, 0.0, 2.0]).relu();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(r.relu(), r);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let up = x.upsample_nearest(2, 2).unwrap();
        assert_eq!(up.shape(), &[4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);
        assert_eq!(x.upsample_nearest(1, 1).unwrap(), x);
        assert_eq!(up.block_mean(2, 2).unwrap(), x);
        assert!(x.upsample_nearest(0, 1).is_err());
    }

    #[test]
    fn l1_and_sum() {
        assert_eq!(t(&[3], &[1.0, -2.0, 0.0]).l1_norm(), 3.0);
        assert_eq!(Tensor::zeros(&[4]).l1_norm(), 0.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = Tensor::zeros(&[1]);
        assert_eq!(x.conv2d(&w, &b).unwrap(), x);
    }

    #[test]
    fn conv_box_kernel_on_one_hot() {
        let mut data = vec![0.0; 25];
        data[2 * 5 + 2] = 1.0;
        let x = t(&[1, 5, 5], &data);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = x.conv2d(&w, &Tensor::zeros(&[1])).unwrap();
        for y in 0..5 {
            for xx in 0..5 {
                let expect = if (1..=3).contains(&y) && (1..=3).contains(&xx) { 1.0 } else { 0.0 };
                assert_eq!(out.data()[y * 5 + xx], expect, "({y},{xx})");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernel() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(x.conv2d(&Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1])).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[1, 2, 2, 2]), &Tensor::zeros(&[1])).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn repeat_channels_stacks_planes() {
        let p = t(&[1, 2], &[1.0, 2.0]);
        let r = p.repeat_channels(3).unwrap();
        assert_eq!(r.shape(), &[3, 1, 2]);
        assert_eq!(r.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}
