//! Sparse adversarial gating: token importance by min–max optimisation
//! against a frozen oracle.
//!
//! A latent gate `G` (one value per token) and a per-token perturbation
//! `delta` are optimised jointly. The gate is relaxed to a soft mask
//! `m = sigmoid(G / T)` whose temperature is annealed from `1/alpha_init` to
//! `1/alpha_end`. The perturbation is injected only through the mask:
//!
//! ```text
//! x_adv = clamp(up(m) ⊙ up(delta) + x, 0, 1)
//! loss  = −(λ_ce·CE + λ_dice·Dice)(f(x_adv), y) + μ‖m‖₁ + β‖delta‖₁
//! ```
//!
//! After every Adam step `delta` is clipped back into `[−ε, ε]`. The emitted
//! map is `sigmoid(G · alpha_end)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::metrics::mean_foreground_dice;
use crate::oracle::OracleNet;
use crate::segmentation::{seg_losses, LabelMap};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SageConfig {
    /// ℓ∞ budget of the perturbation, in intensity units of a `[0, 1]` image.
    pub epsilon: f64,
    pub steps: usize,
    pub alpha_init: f64,
    pub alpha_end: f64,
    pub mu_sparse: f64,
    pub beta_delta: f64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lr: f64,
    /// Decoupled weight decay on the gate and perturbation; 0 is plain Adam.
    pub weight_decay: f64,
    pub token_size: usize,
    /// Base seed; per-image seeds are derived from it. The optimisation itself
    /// starts from zeros and draws no randomness.
    pub seed: u64,
}

impl Default for SageConfig {
    fn default() -> Self {
        SageConfig {
            epsilon: 0.05,
            steps: 200,
            alpha_init: 0.1,
            alpha_end: 10.0,
            mu_sparse: 0.01,
            beta_delta: 0.01,
            lambda_ce: 1.0,
            lambda_dice: 1.0,
            lr: 1e-3,
            weight_decay: 0.0,
            token_size: 16,
            seed: 0,
        }
    }
}

impl SageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("SageConfig", msg));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be a finite non-negative budget", self.epsilon));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.alpha_init > 0.0 && self.alpha_end >= self.alpha_init && self.alpha_end.is_finite()) {
            return bad(format!(
                "need 0 < alpha_init ≤ alpha_end, got {} and {}",
                self.alpha_init, self.alpha_end
            ));
        }
        for (name, v) in [
            ("mu_sparse", self.mu_sparse),
            ("beta_delta", self.beta_delta),
            ("lambda_ce", self.lambda_ce),
            ("lambda_dice", self.lambda_dice),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be non-negative"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.token_size == 0 {
            return bad("token_size must be at least 1".into());
        }
        Ok(())
    }

    /// Seed for one image, independent of scheduling order.
    pub fn image_seed(&self, image_id: &str) -> u64 {
        // FNV-1a over the id, mixed with the base seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for b in image_id.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Temperature at `step` (1-based): the inverse of an inverse temperature
/// that rises linearly from `alpha_init` to `alpha_end`.
pub fn anneal(step: usize, cfg: &SageConfig) -> Result<f64> {
    if step == 0 || step > cfg.steps {
        return Err(Error::invalid("anneal", format!("step {step} outside 1..={}", cfg.steps)));
    }
    let alpha = if cfg.steps == 1 {
        cfg.alpha_end
    } else {
        let f = (step - 1) as f64 / (cfg.steps - 1) as f64;
        cfg.alpha_init * (1.0 - f) + cfg.alpha_end * f
    };
    Ok(1.0 / alpha)
}

pub fn soft_mask(gate: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    Ok(gate.scalar_mul(1.0 / temperature)?.sigmoid())
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("soft_mask", format!("temperature {t} must be positive")))
    }
}

fn check_grids(x: &Tensor, mask: &Tensor, delta: &Tensor, token_size: usize) -> Result<()> {
    let fail = || Error::invalid(
        "synthesize_adversarial",
        format!(
            "image {:?}, mask {:?}, delta {:?} do not agree at token size {token_size}",
            x.shape(),
            mask.shape(),
            delta.shape()
        ),
    );
    if x.rank() != 3 || mask.rank() != 2 || delta.rank() != 3 || token_size == 0 {
        return Err(fail());
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ht, wt) = (mask.shape()[0], mask.shape()[1]);
    if ht * token_size != h || wt * token_size != w || delta.shape() != [c, ht, wt] {
        return Err(fail());
    }
    Ok(())
}

/// `clamp(x + up(m) ⊙ up(delta), 0, 1)`, untracked.
pub fn synthesize_adversarial(x: &Tensor, mask: &Tensor, delta: &Tensor, token_size: usize) -> Result<Tensor> {
    check_grids(x, mask, delta, token_size)?;
    let c = x.shape()[0];
    let m = mask.repeat_channels(c)?.upsample_nearest(token_size, token_size)?;
    let d = delta.upsample_nearest(token_size, token_size)?;
    x.add(&m.mul(&d)?)?.clamp(0.0, 1.0)
}

fn record_adversarial(tape: &mut Tape, x: Var, mask: Var, delta: Var, channels: usize, t: usize) -> Result<Var> {
    let m = tape.repeat_channels(mask, channels)?;
    let m = tape.upsample_nearest(m, t, t)?;
    let d = tape.upsample_nearest(delta, t, t)?;
    let pert = tape.mul(m, d)?;
    let sum = tape.add(x, pert)?;
    tape.clamp(sum, 0.0, 1.0)
}

fn record_loss(tape: &mut Tape, oracle: &OracleNet, x_adv: Var, y: &LabelMap, m: Var, delta: Var, cfg: &SageConfig) -> Result<Var> {
    let (logits, _) = oracle.record(tape, x_adv, false)?;
    let (ce, dice) = seg_losses(tape, logits, y)?;
    let ce = tape.scalar_mul(ce, -cfg.lambda_ce)?;
    let dice = tape.scalar_mul(dice, -cfg.lambda_dice)?;
    let l1m = tape.l1_norm(m)?;
    let l1m = tape.scalar_mul(l1m, cfg.mu_sparse)?;
    let l1d = tape.l1_norm(delta)?;
    let l1d = tape.scalar_mul(l1d, cfg.beta_delta)?;
    let attack = tape.add(ce, dice)?;
    let sparse = tape.add(l1m, l1d)?;
    tape.add(attack, sparse)
}

/// Value of the SAGE objective for a given adversarial sample and gates.
pub fn sage_loss(
    oracle: &OracleNet,
    x_adv: &Tensor,
    y: &LabelMap,
    mask: &Tensor,
    delta: &Tensor,
    cfg: &SageConfig,
) -> Result<f64> {
    if !oracle.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let mut tape = Tape::new();
    let xa = tape.constant(x_adv.clone());
    let m = tape.constant(mask.clone());
    let d = tape.constant(delta.clone());
    let loss = record_loss(&mut tape, oracle, xa, y, m, d, cfg)?;
    tape.value(loss)?.item()
}

/// Live optimisation variables of one SAGE run.
#[derive(Clone, Debug, PartialEq)]
pub struct SageState {
    pub gate: Tensor,
    pub delta: Tensor,
    adam_gate: AdamState,
    adam_delta: AdamState,
    step: usize,
}

impl SageState {
    /// Zero gate and perturbation for a `channels × grid_h × grid_w` problem.
    pub fn new(channels: usize, grid_h: usize, grid_w: usize, cfg: &SageConfig) -> Self {
        let adam = AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::with_lr(cfg.lr)
        };
        SageState {
            gate: Tensor::zeros(&[grid_h, grid_w]),
            delta: Tensor::zeros(&[channels, grid_h, grid_w]),
            adam_gate: AdamState::new(&[grid_h, grid_w], adam),
            adam_delta: AdamState::new(&[channels, grid_h, grid_w], adam),
            step: 0,
        }
    }

    /// State sized for image `x` at `cfg.token_size`.
    pub fn for_image(x: &Tensor, cfg: &SageConfig) -> Result<Self> {
        let t = cfg.token_size;
        if x.rank() != 3 || t == 0 || !x.shape()[1].is_multiple_of(t) || !x.shape()[2].is_multiple_of(t) {
            return Err(Error::invalid(
                "SageState",
                format!("image {:?} is not divisible into {t}×{t} tokens", x.shape()),
            ));
        }
        Ok(Self::new(x.shape()[0], x.shape()[1] / t, x.shape()[2] / t, cfg))
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// Diagnostics from one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub temperature: f64,
    pub loss: f64,
    /// Extremes of the adversarial sample fed to the oracle.
    pub x_adv_min: f64,
    pub x_adv_max: f64,
}

/// One anneal → mask → synthesize → loss → backward → Adam → clip cycle.
pub fn sage_step(state: &mut SageState, oracle: &OracleNet, x: &Tensor, y: &LabelMap, cfg: &SageConfig) -> Result<StepReport> {
    if !oracle.is_frozen() {
        return Err(Error::NotFrozen);
    }
    if state.step >= cfg.steps {
        return Err(Error::invalid("sage_step", format!("all {} steps already taken", cfg.steps)));
    }
    let temperature = anneal(state.step + 1, cfg)?;
    check_grids(x, &state.gate, &state.delta, cfg.token_size)?;

    let mut tape = Tape::new();
    let g = tape.leaf(state.gate.clone());
    let d = tape.leaf(state.delta.clone());
    let xv = tape.constant(x.clone());
    let scaled = tape.scalar_mul(g, 1.0 / temperature)?;
    let m = tape.sigmoid(scaled)?;
    let x_adv = record_adversarial(&mut tape, xv, m, d, x.shape()[0], cfg.token_size)?;
    let loss = record_loss(&mut tape, oracle, x_adv, y, m, d, cfg)?;

    let grads = tape.backward(loss)?;
    let xa = tape.value(x_adv)?;
    let report = StepReport {
        temperature,
        loss: tape.value(loss)?.item()?,
        x_adv_min: xa.data().iter().cloned().fold(f64::INFINITY, f64::min),
        x_adv_max: xa.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    state.adam_gate.step(&mut state.gate, &grads.wrt(g)?)?;
    state.adam_delta.step(&mut state.delta, &grads.wrt(d)?)?;
    let eps = cfg.epsilon;
    for v in state.delta.data_mut() {
        *v = v.clamp(-eps, eps);
    }
    state.step += 1;
    Ok(report)
}

/// Final map `sigmoid(G / T_end)` of a finished (or partial) state.
pub fn importance_from_state(state: &SageState, cfg: &SageConfig, image_id: &str, oracle_id: &str) -> Result<ImportanceMap> {
    let t_end = anneal(cfg.steps, cfg)?;
    ImportanceMap::new(soft_mask(&state.gate, t_end)?, cfg.token_size, image_id, oracle_id)
}

/// Runs all `cfg.steps` steps from a zero state and returns the map.
pub fn run_sage(oracle: &OracleNet, x: &Tensor, y: &LabelMap, cfg: &SageConfig, image_id: &str) -> Result<ImportanceMap> {
    cfg.validate()?;
    let mut state = SageState::for_image(x, cfg)?;
    if (y.height(), y.width()) != (x.shape()[1], x.shape()[2]) {
        return Err(Error::ShapeMismatch {
            op: "run_sage",
            left: x.shape().to_vec(),
            right: vec![y.height(), y.width()],
        });
    }
    for _ in 0..cfg.steps {
        sage_step(&mut state, oracle, x, y, cfg)?;
    }
    importance_from_state(&state, cfg, image_id, oracle.id())
}

/// Largest grid accepted by [`brute_force_importance`].
pub const BRUTE_FORCE_MAX_TOKENS: usize = 256;
pub const BRUTE_FORCE_MAX_CHANNELS: usize = 8;

/// Exhaustive token-shift attack used as an independent ground truth.
///
/// For each token, every per-channel sign pattern of a constant ±ε shift is
/// applied (clamped to `[0, 1]`); the score is the largest drop in mean
/// foreground Dice of the oracle's hard prediction. Scores are min–max
/// normalised; a flat score field maps to all zeros.
pub fn brute_force_importance(
    oracle: &OracleNet,
    x: &Tensor,
    y: &LabelMap,
    epsilon: f64,
    token_size: usize,
) -> Result<ImportanceMap> {
    if x.rank() != 3 || token_size == 0 || !x.shape()[1].is_multiple_of(token_size) || !x.shape()[2].is_multiple_of(token_size) {
        return Err(Error::invalid(
            "brute_force_importance",
            format!("image {:?} is not divisible into tokens of {token_size}", x.shape()),
        ));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ht, wt) = (h / token_size, w / token_size);
    if ht * wt > BRUTE_FORCE_MAX_TOKENS || c > BRUTE_FORCE_MAX_CHANNELS {
        return Err(Error::invalid(
            "brute_force_importance",
            format!("{ht}×{wt} tokens with {c} channels is too large for exhaustive search"),
        ));
    }
    let k = oracle.num_classes();
    let base = mean_foreground_dice(&LabelMap::argmax(&oracle.forward(x)?)?, y, k)?;
    let mut scores = Vec::with_capacity(ht * wt);
    for ty in 0..ht {
        for tx in 0..wt {
            let mut worst = base;
            for pattern in 0..(1u32 << c) {
                let mut xs = x.clone();
                let data = xs.data_mut();
                for ch in 0..c {
                    let shift = if pattern >> ch & 1 == 1 { epsilon } else { -epsilon };
                    for yy in ty * token_size..(ty + 1) * token_size {
                        let row = ch * h * w + yy * w;
                        for v in &mut data[row + tx * token_size..row + (tx + 1) * token_size] {
                            *v = (*v + shift).clamp(0.0, 1.0);
                        }
                    }
                }
                let pred = LabelMap::argmax(&oracle.forward(&xs)?)?;
                worst = worst.min(mean_foreground_dice(&pred, y, k)?);
            }
            scores.push(base - worst);
        }
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if hi > lo {
        scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; scores.len()]
    };
    ImportanceMap::new(Tensor::new(&[ht, wt], normalized)?, token_size, "", oracle.id())
}

/// Spearman rank correlation; tied values share their average rank.
/// Returns 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("spearman", format!("need two equal samples of size ≥ 2, got {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (da * db).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}
