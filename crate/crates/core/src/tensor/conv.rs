//! Same-padded stride-1 convolution kernels over flat slices.
//!
//! Every kernel walks (out channel, in channel, tap) and then rows, so the
//! innermost loop is a contiguous axpy or dot product over one row segment.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

/// Row and column ranges over which tap (ky, kx) reads inside the image.
#[derive(Clone, Copy)]
struct Tap {
    dy: isize,
    dx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Self> {
        let (is, ws) = (input.shape(), weight.shape());
        if is.len() != 3 {
            return Err(Error::invalid("conv2d", format!("input must be C×H×W, got {is:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::invalid("conv2d", format!("weight must be O×C×k×k, got {ws:?}")));
        }
        if ws[2] % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {} must be odd", ws[2])));
        }
        if ws[1] != is[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: is.to_vec(),
                right: ws.to_vec(),
            });
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: ws.to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(ConvGeometry {
            in_channels: is[0],
            out_channels: ws[0],
            kernel: ws[2],
            height: is[1],
            width: is[2],
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn taps(&self) -> impl Iterator<Item = (usize, Tap)> + '_ {
        let pad = (self.kernel / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        (0..self.kernel * self.kernel).map(move |tap| {
            let dy = (tap / self.kernel) as isize - pad;
            let dx = (tap % self.kernel) as isize - pad;
            let t = Tap {
                dy,
                dx,
                y0: (-dy).max(0) as usize,
                y1: (h - dy).clamp(0, h) as usize,
                x0: (-dx).max(0) as usize,
                x1: (w - dx).clamp(0, w) as usize,
            };
            (tap, t)
        })
    }
}

impl Tap {
    fn src_row(&self, y: usize) -> usize {
        (y as isize + self.dy) as usize
    }

    fn src_col(&self) -> usize {
        (self.x0 as isize + self.dx) as usize
    }

    fn is_empty(&self) -> bool {
        self.y0 >= self.y1 || self.x0 >= self.x1
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let (plane, w, kk) = (g.plane(), g.width, g.kernel * g.kernel);
    for o in 0..g.out_channels {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for c in 0..g.in_channels {
            let src = &input[c * plane..(c + 1) * plane];
            let wk = &weight[(o * g.in_channels + c) * kk..(o * g.in_channels + c + 1) * kk];
            for (tap, t) in g.taps() {
                let k = wk[tap];
                if k == 0.0 || t.is_empty() {
                    continue;
                }
                let n = t.x1 - t.x0;
                for y in t.y0..t.y1 {
                    let s = t.src_row(y) * w + t.src_col();
                    let d = y * w + t.x0;
                    for (a, b) in dst[d..d + n].iter_mut().zip(&src[s..s + n]) {
                        *a += k * b;
                    }
                }
            }
        }
    }
}

/// Accumulates the input gradient (transposed convolution of `grad_out`).
pub(crate) fn backward_input(g: &ConvGeometry, grad_out: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    let (plane, w, kk) = (g.plane(), g.width, g.kernel * g.kernel);
    for o in 0..g.out_channels {
        let go = &grad_out[o * plane..(o + 1) * plane];
        for c in 0..g.in_channels {
            let gi = &mut grad_in[c * plane..(c + 1) * plane];
            let wk = &weight[(o * g.in_channels + c) * kk..(o * g.in_channels + c + 1) * kk];
            for (tap, t) in g.taps() {
                let k = wk[tap];
                if k == 0.0 || t.is_empty() {
                    continue;
                }
                let n = t.x1 - t.x0;
                for y in t.y0..t.y1 {
                    let s = t.src_row(y) * w + t.src_col();
                    let d = y * w + t.x0;
                    for (a, b) in gi[s..s + n].iter_mut().zip(&go[d..d + n]) {
                        *a += k * b;
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients.
pub(crate) fn backward_params(
    g: &ConvGeometry,
    grad_out: &[f64],
    input: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) {
    let (plane, w, kk) = (g.plane(), g.width, g.kernel * g.kernel);
    for o in 0..g.out_channels {
        let go = &grad_out[o * plane..(o + 1) * plane];
        grad_bias[o] += go.iter().sum::<f64>();
        for c in 0..g.in_channels {
            let src = &input[c * plane..(c + 1) * plane];
            let gw = &mut grad_weight[(o * g.in_channels + c) * kk..(o * g.in_channels + c + 1) * kk];
            for (tap, t) in g.taps() {
                if t.is_empty() {
                    continue;
                }
                let n = t.x1 - t.x0;
                let mut acc = 0.0;
                for y in t.y0..t.y1 {
                    let s = t.src_row(y) * w + t.src_col();
                    let d = y * w + t.x0;
                    acc += go[d..d + n].iter().zip(&src[s..s + n]).map(|(a, b)| a * b).sum::<f64>();
                }
                gw[tap] += acc;
            }
        }
    }
}
