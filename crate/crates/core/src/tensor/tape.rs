//! Per-computation reverse-mode tape.
//!
//! A [`Tape`] owns the value of every recorded node. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation. Tapes are meant to be built for a
//! single loss evaluation and then dropped.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{conv, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    ScalarAdd(usize),
    Sigmoid(usize),
    Relu(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Conv2d { input: usize, weight: usize, bias: usize },
    Upsample { input: usize, fh: usize, fw: usize },
    RepeatChannels(usize),
    L1(usize),
    Sum(usize),
    CrossEntropy { logits: usize, target: Tensor, probs: Vec<f64> },
    SoftDice { logits: usize, target: Tensor, probs: Vec<f64>, smooth: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::NotOnTape(v.index))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = f(self.val(ia), self.val(ib))?;
        let ng = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, op(ia, ib), ng))
    }

    fn unary(&mut self, a: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.index(a)?;
        let value = f(self.val(ia))?;
        let ng = self.grad_flag(&[ia]);
        Ok(self.push(value, op(ia), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::add, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::sub, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::mul, Op::Mul)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |t| t.scalar_mul(s), |i| Op::ScalarMul(i, s))
    }

    pub fn scalar_add(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |t| t.scalar_add(s), Op::ScalarAdd)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(t.sigmoid()), Op::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(t.relu()), Op::Relu)
    }

    /// Clamp with gradient 1 strictly inside `(lo, hi)` and 0 elsewhere.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |t| t.clamp(lo, hi), |input| Op::Clamp { input, lo, hi })
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ii, iw, ib) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let value = self.val(ii).conv2d(self.val(iw), self.val(ib))?;
        let ng = self.grad_flag(&[ii, iw, ib]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: ii,
                weight: iw,
                bias: ib,
            },
            ng,
        ))
    }

    pub fn upsample_nearest(&mut self, a: Var, fh: usize, fw: usize) -> Result<Var> {
        self.unary(a, |t| t.upsample_nearest(fh, fw), |input| Op::Upsample { input, fh, fw })
    }

    pub fn repeat_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        self.unary(a, |t| t.repeat_channels(channels), Op::RepeatChannels)
    }

    /// Sum of absolute values. The backward pass uses sign(0) = 0.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(Tensor::scalar(t.l1_norm())), Op::L1)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(Tensor::scalar(t.sum())), Op::Sum)
    }

    /// Mean per-pixel cross-entropy between softmax(logits) and a soft
    /// `K×H×W` target whose channels sum to one at every pixel.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let il = self.index(logits)?;
        let lt = self.val(il);
        check_target("cross_entropy", lt, target)?;
        let (k, n) = (lt.shape()[0], lt.shape()[1] * lt.shape()[2]);
        let probs = softmax_channels(lt.data(), k, n);
        let mut loss = 0.0;
        for p in 0..n {
            let z: Vec<f64> = (0..k).map(|c| lt.data()[c * n + p]).collect();
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
            for (c, zc) in z.iter().enumerate() {
                let g = target.data()[c * n + p];
                if g != 0.0 {
                    loss += g * (lse - zc);
                }
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let ng = self.grad_flag(&[il]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: il,
                target: target.clone(),
                probs,
            },
            ng,
        ))
    }

    /// `1 − mean_k (2Σp·g + s) / (Σp + Σg + s)` over all `K` classes, with
    /// `p = softmax(logits)`.
    pub fn soft_dice(&mut self, logits: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        let il = self.index(logits)?;
        let lt = self.val(il);
        check_target("soft_dice", lt, target)?;
        let (k, n) = (lt.shape()[0], lt.shape()[1] * lt.shape()[2]);
        let probs = softmax_channels(lt.data(), k, n);
        let mut mean = 0.0;
        for c in 0..k {
            let (i, ps, gs) = dice_sums(&probs[c * n..(c + 1) * n], &target.data()[c * n..(c + 1) * n]);
            mean += (2.0 * i + smooth) / (ps + gs + smooth);
        }
        let value = Tensor::scalar(1.0 - mean / k as f64);
        let ng = self.grad_flag(&[il]);
        Ok(self.push(
            value,
            Op::SoftDice {
                logits: il,
                target: target.clone(),
                probs,
                smooth,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.index(root)?;
        if self.val(r).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.val(r).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[r] = Some(Tensor::full(self.val(r).shape(), 1.0));
        for i in (0..=r).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |j: usize| self.nodes[j].needs_grad;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if needs(j) {
                        accumulate(grads, j, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, zip(g, self.val(*b), |gv, bv| gv * bv));
                }
                if needs(*b) {
                    accumulate(grads, *b, zip(g, self.val(*a), |gv, av| gv * av));
                }
            }
            Op::ScalarMul(a, s) => accumulate(grads, *a, map(g, |v| v * s)),
            Op::ScalarAdd(a) => accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => accumulate(grads, *a, zip(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Relu(a) => accumulate(grads, *a, zip(g, self.val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                accumulate(
                    grads,
                    *input,
                    zip(g, self.val(*input), |gv, x| if x > lo && x < hi { gv } else { 0.0 }),
                );
            }
            Op::Conv2d { input, weight, bias } => {
                let (x, w, b) = (self.val(*input), self.val(*weight), self.val(*bias));
                let geom = conv::ConvGeometry::new(x, w, b).expect("validated in forward");
                if needs(*input) {
                    let mut gi = vec![0.0; x.len()];
                    conv::backward_input(&geom, g.data(), w.data(), &mut gi);
                    accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), gi));
                }
                if needs(*weight) || needs(*bias) {
                    let mut gw = vec![0.0; w.len()];
                    let mut gb = vec![0.0; b.len()];
                    conv::backward_params(&geom, g.data(), x.data(), &mut gw, &mut gb);
                    if needs(*weight) {
                        accumulate(grads, *weight, Tensor::from_parts(w.shape().to_vec(), gw));
                    }
                    if needs(*bias) {
                        accumulate(grads, *bias, Tensor::from_parts(b.shape().to_vec(), gb));
                    }
                }
            }
            Op::Upsample { input, fh, fw } => {
                let summed = g.block_sum(*fh, *fw).expect("upsampled shape divides");
                accumulate(grads, *input, summed);
            }
            Op::RepeatChannels(a) => {
                let plane = self.val(*a);
                let mut acc = vec![0.0; plane.len()];
                for chunk in g.data().chunks_exact(plane.len()) {
                    for (s, v) in acc.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(plane.shape().to_vec(), acc));
            }
            Op::L1(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, map(self.val(*a), |x| s * sign(x)));
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.val(*a).shape(), s));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let s = g.data()[0];
                let lt = self.val(*logits);
                let (k, n) = (lt.shape()[0], lt.shape()[1] * lt.shape()[2]);
                let scale = s / n as f64;
                let mut gz = vec![0.0; lt.len()];
                for p in 0..n {
                    let mass: f64 = (0..k).map(|c| target.data()[c * n + p]).sum();
                    for c in 0..k {
                        gz[c * n + p] = scale * (mass * probs[c * n + p] - target.data()[c * n + p]);
                    }
                }
                accumulate(grads, *logits, Tensor::from_parts(lt.shape().to_vec(), gz));
            }
            Op::SoftDice {
                logits,
                target,
                probs,
                smooth,
            } => {
                let s = g.data()[0];
                let lt = self.val(*logits);
                let (k, n) = (lt.shape()[0], lt.shape()[1] * lt.shape()[2]);
                // d(loss)/d(prob) first, then through the per-pixel softmax.
                let mut gp = vec![0.0; lt.len()];
                for c in 0..k {
                    let pc = &probs[c * n..(c + 1) * n];
                    let gc = &target.data()[c * n..(c + 1) * n];
                    let (i, ps, gs) = dice_sums(pc, gc);
                    let den = ps + gs + smooth;
                    let num = 2.0 * i + smooth;
                    for p in 0..n {
                        let d = (2.0 * gc[p] * den - num) / (den * den);
                        gp[c * n + p] = -s * d / k as f64;
                    }
                }
                let mut gz = vec![0.0; lt.len()];
                for p in 0..n {
                    let dot: f64 = (0..k).map(|c| probs[c * n + p] * gp[c * n + p]).sum();
                    for c in 0..k {
                        gz[c * n + p] = probs[c * n + p] * (gp[c * n + p] - dot);
                    }
                }
                accumulate(grads, *logits, Tensor::from_parts(lt.shape().to_vec(), gz));
            }
        }
    }
}

/// Gradients of a scalar root with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when no path reaches the root.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::NotOnTape(v.index));
        }
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index]),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], j: usize, contribution: Tensor) {
    match &mut grads[j] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(contribution),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_target(op: &'static str, logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.rank() != 3 {
        return Err(Error::invalid(op, format!("logits must be K×H×W, got {:?}", logits.shape())));
    }
    if logits.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: logits.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Softmax over the leading (class) axis of a `K×N` layout.
pub(crate) fn softmax_channels(logits: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut probs = vec![0.0; k * n];
    for p in 0..n {
        let zmax = (0..k).map(|c| logits[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..k {
            let e = (logits[c * n + p] - zmax).exp();
            probs[c * n + p] = e;
            total += e;
        }
        for c in 0..k {
            probs[c * n + p] /= total;
        }
    }
    probs
}

fn dice_sums(p: &[f64], g: &[f64]) -> (f64, f64, f64) {
    let inter = p.iter().zip(g).map(|(a, b)| a * b).sum();
    (inter, p.iter().sum(), g.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central differences of `f` at `x`, h = 1e-5.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().chain(b).map(|v| v * v).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    fn one_hot(labels: &[usize], k: usize) -> Tensor {
        let n = labels.len();
        let mut d = vec![0.0; k * n];
        for (p, &l) in labels.iter().enumerate() {
            d[l * n + p] = 1.0;
        }
        let side = (n as f64).sqrt() as usize;
        Tensor::new(&[k, side, side], d).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -4.0, 2.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let unused = tape.leaf(Tensor::full(&[2, 2], 3.0));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn foreign_and_non_scalar_roots_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let va = a.leaf(Tensor::full(&[1], 1.0));
        let _ = b.leaf(Tensor::full(&[1], 1.0));
        assert!(matches!(b.backward(va), Err(Error::NotOnTape(_))));
        let vec = a.leaf(Tensor::full(&[2], 1.0));
        assert!(a.backward(vec).is_err());
    }

    #[test]
    fn kinks_have_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.3, 0.5, -1.0]).unwrap());
        let c = tape.clamp(x, 0.0, 1.0).unwrap();
        let r = tape.relu(x).unwrap();
        let both = tape.add(c, r).unwrap();
        let s = tape.sum(both).unwrap();
        let g = tape.backward(s).unwrap().wrt(x).unwrap();
        // clamp: 0, 1, 0; relu: 1, 1, 0
        assert_eq!(g.data(), &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let up = tape.upsample_nearest(x, 2, 2).unwrap();
        let s = tape.sum(up).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), Tensor::full(&[2, 2], 4.0));
    }

    #[test]
    fn l1_gradient_is_sign() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-2.0, 3.0, 0.0]).unwrap());
        let l = tape.l1_norm(x).unwrap();
        assert_eq!(tape.value(l).unwrap().item().unwrap(), 5.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn sigmoid_gradient_matches_differences() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1], 1.0));
        let y = tape.sigmoid(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().wrt(x).unwrap();
        let fd = numeric_grad(&Tensor::full(&[1], 1.0), |t| t.sigmoid().sum());
        assert!(rel_err(g.data(), &fd) < 1e-6);
    }

    #[test]
    fn l1_of_tempered_sigmoid_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gate = random(&[3, 3], &mut rng);
        let temp = 0.7;
        let f = |g: &Tensor| g.scalar_mul(1.0 / temp).unwrap().sigmoid().l1_norm();
        let mut tape = Tape::new();
        let gv = tape.leaf(gate.clone());
        let scaled = tape.scalar_mul(gv, 1.0 / temp).unwrap();
        let m = tape.sigmoid(scaled).unwrap();
        let l = tape.l1_norm(m).unwrap();
        let g = tape.backward(l).unwrap().wrt(gv).unwrap();
        assert!(rel_err(g.data(), &numeric_grad(&gate, f)) < 1e-5);
    }

    #[test]
    fn conv_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        // A fixed random projection makes the root sensitive to every output.
        let proj = random(&[3, 4, 4], &mut rng);
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| x.conv2d(w, b).unwrap().mul(&proj).unwrap().sum();

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let pv = tape.constant(proj.clone());
        let y = tape.conv2d(xv, wv, bv).unwrap();
        let yp = tape.mul(y, pv).unwrap();
        let s = tape.sum(yp).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(rel_err(g.wrt(wv).unwrap().data(), &numeric_grad(&w, |w| f(&x, w, &b))) < 1e-5);
        assert!(rel_err(g.wrt(xv).unwrap().data(), &numeric_grad(&x, |x| f(x, &w, &b))) < 1e-5);
        assert!(rel_err(g.wrt(bv).unwrap().data(), &numeric_grad(&b, |b| f(&x, &w, b))) < 1e-5);
        assert_eq!(g.wrt(pv).unwrap(), Tensor::zeros(&[3, 4, 4]));
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_losses() {
        let labels = [0, 1, 1, 0, 1, 0, 0, 1, 1];
        let target = one_hot(&labels, 2);
        let logits = target.scalar_mul(20.0).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(logits);
        let ce = tape.cross_entropy(z, &target).unwrap();
        let dice = tape.soft_dice(z, &target, 1.0).unwrap();
        assert!(tape.value(ce).unwrap().item().unwrap() < 1e-8);
        assert!(tape.value(dice).unwrap().item().unwrap() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let target = one_hot(&[0, 1, 1, 0], 2);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let ce = tape.cross_entropy(z, &target).unwrap();
        assert!((tape.value(ce).unwrap().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn segmentation_loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random(&[2, 4, 4], &mut rng);
        let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..2)).collect();
        let target = one_hot(&labels, 2);
        let f = |z: &Tensor| {
            let mut t = Tape::new();
            let v = t.constant(z.clone());
            let a = t.cross_entropy(v, &target).unwrap();
            let b = t.soft_dice(v, &target, 1.0).unwrap();
            t.value(a).unwrap().item().unwrap() + t.value(b).unwrap().item().unwrap()
        };
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone());
        let a = tape.cross_entropy(z, &target).unwrap();
        let b = tape.soft_dice(z, &target, 1.0).unwrap();
        let s = tape.add(a, b).unwrap();
        let g = tape.backward(s).unwrap().wrt(z).unwrap();
        assert!(rel_err(g.data(), &numeric_grad(&logits, f)) < 1e-4);
    }
}
