//! Baseline augmentation catalog. Each transform is a pure function of its
//! inputs and the supplied RNG; every output image is clamped to `[0, 1]`.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EraseFill {
    Zero,
    Noise,
}

/// One augmentation with its sampling ranges. Ranges are `(lo, hi)` with
/// `lo ≤ hi`; equal ends pin the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentSpec {
    Identity,
    GaussianNoise {
        #[serde(default = "defaults::noise_sigma")]
        sigma: (f64, f64),
    },
    GaussianBlur {
        #[serde(default = "defaults::blur_sigma")]
        sigma: (f64, f64),
        #[serde(default = "defaults::blur_kernel")]
        kernel: usize,
    },
    Gamma {
        #[serde(default = "defaults::gamma")]
        gamma: (f64, f64),
    },
    BrightnessContrast {
        #[serde(default = "defaults::brightness")]
        brightness: (f64, f64),
        #[serde(default = "defaults::contrast")]
        contrast: (f64, f64),
    },
    BiasField {
        #[serde(default = "defaults::bias_order")]
        order: usize,
        #[serde(default = "defaults::bias_amplitude")]
        amplitude: f64,
    },
    RandomErasing {
        /// Erased fraction of the image area.
        #[serde(default = "defaults::erase_area")]
        area: (f64, f64),
        /// Height-to-width ratio, sampled log-uniformly.
        #[serde(default = "defaults::erase_aspect")]
        aspect: (f64, f64),
        #[serde(default = "defaults::erase_fill")]
        fill: EraseFill,
    },
    Cutout {
        /// Square side in pixels; a quarter of the shorter image side if absent.
        #[serde(default)]
        size: Option<usize>,
        #[serde(default = "defaults::holes")]
        holes: usize,
    },
    Mixup {
        #[serde(default = "defaults::mixup_alpha")]
        alpha: f64,
    },
    Cutmix {
        #[serde(default = "defaults::cutmix_alpha")]
        alpha: f64,
    },
    /// Applies each step in order with the same RNG; mixing kinds excluded.
    Sequence { steps: Vec<AugmentSpec> },
}

mod defaults {
    use super::EraseFill;

    pub fn noise_sigma() -> (f64, f64) {
        (0.01, 0.1)
    }
    pub fn blur_sigma() -> (f64, f64) {
        (0.5, 1.5)
    }
    pub fn blur_kernel() -> usize {
        5
    }
    pub fn gamma() -> (f64, f64) {
        (0.7, 1.4)
    }
    pub fn brightness() -> (f64, f64) {
        (-0.1, 0.1)
    }
    pub fn contrast() -> (f64, f64) {
        (0.8, 1.2)
    }
    pub fn bias_order() -> usize {
        3
    }
    pub fn bias_amplitude() -> f64 {
        0.3
    }
    pub fn erase_area() -> (f64, f64) {
        (0.02, 0.33)
    }
    pub fn erase_aspect() -> (f64, f64) {
        (0.3, 3.3)
    }
    pub fn erase_fill() -> EraseFill {
        EraseFill::Zero
    }
    pub fn holes() -> usize {
        1
    }
    pub fn mixup_alpha() -> f64 {
        0.4
    }
    pub fn cutmix_alpha() -> f64 {
        1.0
    }
}

impl AugmentSpec {
    pub fn gaussian_noise() -> Self {
        AugmentSpec::GaussianNoise {
            sigma: defaults::noise_sigma(),
        }
    }

    pub fn cutout() -> Self {
        AugmentSpec::Cutout {
            size: None,
            holes: defaults::holes(),
        }
    }

    pub fn mixup() -> Self {
        AugmentSpec::Mixup {
            alpha: defaults::mixup_alpha(),
        }
    }

    pub fn cutmix() -> Self {
        AugmentSpec::Cutmix {
            alpha: defaults::cutmix_alpha(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentSpec::Identity => "identity",
            AugmentSpec::GaussianNoise { .. } => "gaussian_noise",
            AugmentSpec::GaussianBlur { .. } => "gaussian_blur",
            AugmentSpec::Gamma { .. } => "gamma",
            AugmentSpec::BrightnessContrast { .. } => "brightness_contrast",
            AugmentSpec::BiasField { .. } => "bias_field",
            AugmentSpec::RandomErasing { .. } => "random_erasing",
            AugmentSpec::Cutout { .. } => "cutout",
            AugmentSpec::Mixup { .. } => "mixup",
            AugmentSpec::Cutmix { .. } => "cutmix",
            AugmentSpec::Sequence { .. } => "sequence",
        }
    }

    /// Mixing kinds need a partner sample.
    pub fn needs_partner(&self) -> bool {
        matches!(self, AugmentSpec::Mixup { .. } | AugmentSpec::Cutmix { .. })
    }

    /// Kinds that leave labels untouched.
    pub fn is_intensity_only(&self) -> bool {
        !self.needs_partner()
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.name();
        let range = |what: &str, (lo, hi): (f64, f64), min: f64| -> Result<()> {
            if lo.is_finite() && hi.is_finite() && lo >= min && lo <= hi {
                Ok(())
            } else {
                Err(Error::invalid("AugmentSpec", format!("{name}: {what} range ({lo}, {hi}) is invalid")))
            }
        };
        let positive = |what: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid("AugmentSpec", format!("{name}: {what} = {v} must be positive")))
            }
        };
        match *self {
            AugmentSpec::Identity => Ok(()),
            AugmentSpec::GaussianNoise { sigma } => range("sigma", sigma, 0.0),
            AugmentSpec::GaussianBlur { sigma, kernel } => {
                range("sigma", sigma, 0.0)?;
                positive("sigma", sigma.0)?;
                check_kernel(kernel)
            }
            AugmentSpec::Gamma { gamma } => {
                range("gamma", gamma, 0.0)?;
                positive("gamma", gamma.0)
            }
            AugmentSpec::BrightnessContrast { brightness, contrast } => {
                range("brightness", brightness, -1.0)?;
                range("contrast", contrast, 0.0)
            }
            AugmentSpec::BiasField { amplitude, .. } => range("amplitude", (amplitude, amplitude), 0.0),
            AugmentSpec::RandomErasing { area, aspect, .. } => {
                range("area", area, 0.0)?;
                if area.1 > 1.0 {
                    return Err(Error::invalid("AugmentSpec", "random_erasing: area fraction above 1"));
                }
                range("aspect", aspect, 0.0)?;
                positive("aspect", aspect.0)
            }
            AugmentSpec::Cutout { size, holes } => {
                if size == Some(0) || holes == 0 {
                    return Err(Error::invalid("AugmentSpec", "cutout: size and holes must be positive"));
                }
                Ok(())
            }
            AugmentSpec::Mixup { alpha } | AugmentSpec::Cutmix { alpha } => positive("alpha", alpha),
            AugmentSpec::Sequence { ref steps } => {
                for step in steps {
                    if step.needs_partner() {
                        return Err(Error::invalid("AugmentSpec", "sequence: mixing kinds cannot be chained"));
                    }
                    step.validate()?;
                }
                Ok(())
            }
        }
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(Error::invalid("blur_kernel", format!("kernel size {k} must be odd")))
    }
}

/// Result of one augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: Tensor,
    pub labels: LabelMap,
    /// Share of the output that comes from the primary sample: the blend
    /// weight for mixup, the kept area fraction for cutmix.
    pub mix_weight: Option<f64>,
    /// Mixup only: labels blended in with weight `1 − mix_weight`.
    pub blend_labels: Option<LabelMap>,
    /// Pixels whose training target is exactly `labels` even under blending.
    pub hard_pixels: Option<Vec<bool>>,
}

impl Augmented {
    fn plain(image: Tensor, labels: LabelMap) -> Self {
        Augmented {
            image,
            labels,
            mix_weight: None,
            blend_labels: None,
            hard_pixels: None,
        }
    }

    /// Per-pixel class distribution (`K×H×W`) for the training loss.
    pub fn target(&self, num_classes: usize) -> Result<Tensor> {
        let mut t = self.labels.one_hot(num_classes)?;
        let (Some(w), Some(other)) = (self.mix_weight, &self.blend_labels) else {
            return Ok(t);
        };
        let n = self.labels.data().len();
        other.check_classes(num_classes)?;
        let d = t.data_mut();
        for p in 0..n {
            if self.hard_pixels.as_ref().is_some_and(|h| h[p]) {
                continue;
            }
            for c in 0..num_classes {
                d[c * n + p] *= w;
            }
            d[other.data()[p] as usize * n + p] += 1.0 - w;
        }
        Ok(t)
    }
}

/// Normalised `k×k` Gaussian kernel.
pub fn blur_kernel(sigma: f64, k: usize) -> Result<Tensor> {
    check_kernel(k)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("blur_kernel", format!("sigma {sigma} must be positive")));
    }
    let r = (k / 2) as f64;
    let mut d = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            d.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|v| *v /= total);
    Tensor::new(&[k, k], d)
}

fn sample<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid("augment", format!("expected C×H×W image, got {:?}", x.shape()))),
    }
}

fn map_values(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v).clamp(0.0, 1.0));
    out
}

/// Applies `spec` to `(x, y)`. Mixing kinds take the partner sample.
pub fn apply<R: Rng + ?Sized>(
    spec: &AugmentSpec,
    x: &Tensor,
    y: &LabelMap,
    rng: &mut R,
    partner: Option<(&Tensor, &LabelMap)>,
) -> Result<Augmented> {
    spec.validate()?;
    let (c, h, w) = dims(x)?;
    if y.dims() != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "augment",
            left: x.shape().to_vec(),
            right: vec![y.height(), y.width()],
        });
    }
    match (spec.needs_partner(), partner.is_some()) {
        (true, false) => return Err(Error::invalid("augment", format!("{} needs a partner sample", spec.name()))),
        (false, true) => return Err(Error::invalid("augment", format!("{} takes no partner sample", spec.name()))),
        _ => {}
    }
    if let Some((x2, y2)) = partner {
        if x2.shape() != x.shape() || y2.dims() != y.dims() {
            return Err(Error::ShapeMismatch {
                op: "augment partner",
                left: x.shape().to_vec(),
                right: x2.shape().to_vec(),
            });
        }
    }
    let image = match *spec {
        AugmentSpec::Identity => x.clone(),
        AugmentSpec::Sequence { ref steps } => {
            let mut out = x.clone();
            for step in steps {
                out = apply(step, &out, y, rng, None)?.image;
            }
            out
        }
        AugmentSpec::GaussianNoise { sigma } => {
            let s = sample(rng, sigma);
            if s == 0.0 {
                x.clone()
            } else {
                let normal = Normal::new(0.0, s).map_err(|e| Error::invalid("gaussian_noise", e.to_string()))?;
                let mut out = x.clone();
                for v in out.data_mut() {
                    *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
                }
                out
            }
        }
        AugmentSpec::GaussianBlur { sigma, kernel } => blur(x, &blur_kernel(sample(rng, sigma), kernel)?),
        AugmentSpec::Gamma { gamma } => {
            let g = sample(rng, gamma);
            map_values(x, |v| v.powf(g))
        }
        AugmentSpec::BrightnessContrast { brightness, contrast } => {
            let b = sample(rng, brightness);
            let k = sample(rng, contrast);
            map_values(x, |v| k * (v - 0.5) + 0.5 + b)
        }
        AugmentSpec::BiasField { order, amplitude } => {
            let field = bias_field(h, w, order, amplitude, rng);
            let mut out = x.clone();
            let n = h * w;
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = (*v * field[i % n]).clamp(0.0, 1.0);
            }
            out
        }
        AugmentSpec::RandomErasing { area, aspect, fill } => {
            let mut out = x.clone();
            if let Some(rect) = erasing_rect(h, w, area, aspect, rng) {
                fill_rect(&mut out, rect, |r| match fill {
                    EraseFill::Zero => 0.0,
                    EraseFill::Noise => r.random::<f64>(),
                }, rng);
            }
            out
        }
        AugmentSpec::Cutout { size, holes } => {
            let side = size.unwrap_or((h.min(w) / 4).max(1));
            let mut out = x.clone();
            for _ in 0..holes {
                let rect = centred_rect(h, w, side, side, rng);
                fill_rect(&mut out, rect, |_| 0.0, rng);
            }
            out
        }
        AugmentSpec::Mixup { alpha } => {
            let (x2, y2) = partner.expect("checked above");
            let lambda = beta(alpha, rng)?;
            let mut out = mixup_with(x, x2, lambda)?;
            out.labels = y.clone();
            out.blend_labels = Some(y2.clone());
            return Ok(out);
        }
        AugmentSpec::Cutmix { alpha } => {
            let (x2, y2) = partner.expect("checked above");
            let lambda = beta(alpha, rng)?;
            let rh = ((h as f64) * (1.0 - lambda).sqrt()).round() as usize;
            let rw = ((w as f64) * (1.0 - lambda).sqrt()).round() as usize;
            let rect = centred_rect(h, w, rh, rw, rng);
            return cutmix_with(x, y, x2, y2, rect);
        }
    };
    debug_assert_eq!(image.shape(), &[c, h, w]);
    Ok(Augmented::plain(image, y.clone()))
}

fn beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let d = Beta::new(alpha, alpha).map_err(|e| Error::invalid("beta", e.to_string()))?;
    Ok(d.sample(rng))
}

/// `λ·x + (1 − λ)·x2`; labels are left to the caller.
pub fn mixup_with(x: &Tensor, x2: &Tensor, lambda: f64) -> Result<Augmented> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("mixup", format!("weight {lambda} outside [0, 1]")));
    }
    let (_, h, w) = dims(x)?;
    let mut out = x.clone();
    if lambda != 1.0 {
        for (v, b) in out.data_mut().iter_mut().zip(x2.data()) {
            *v = (lambda * *v + (1.0 - lambda) * b).clamp(0.0, 1.0);
        }
    }
    let mut aug = Augmented::plain(out, LabelMap::filled(h, w, 0));
    aug.mix_weight = Some(lambda);
    Ok(aug)
}

/// Half-open pixel rectangle `(y0, x0, y1, x1)`.
pub type Rect = (usize, usize, usize, usize);

/// Pastes `rect` of `(x2, y2)` over `(x, y)`.
pub fn cutmix_with(x: &Tensor, y: &LabelMap, x2: &Tensor, y2: &LabelMap, rect: Rect) -> Result<Augmented> {
    let (c, h, w) = dims(x)?;
    let (y0, x0, y1, x1) = rect;
    if y1 > h || x1 > w || y0 > y1 || x0 > x1 {
        return Err(Error::invalid("cutmix", format!("rectangle {rect:?} outside {h}×{w}")));
    }
    let mut img = x.clone();
    let mut lab = y.clone();
    for ch in 0..c {
        for yy in y0..y1 {
            let row = ch * h * w + yy * w;
            img.data_mut()[row + x0..row + x1].copy_from_slice(&x2.data()[row + x0..row + x1]);
        }
    }
    for yy in y0..y1 {
        lab.data_mut()[yy * w + x0..yy * w + x1].copy_from_slice(&y2.data()[yy * w + x0..yy * w + x1]);
    }
    let mut aug = Augmented::plain(img, lab);
    aug.mix_weight = Some(1.0 - ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64);
    Ok(aug)
}

/// `rh×rw` rectangle centred at a uniform pixel, clipped to the image.
fn centred_rect<R: Rng + ?Sized>(h: usize, w: usize, rh: usize, rw: usize, rng: &mut R) -> Rect {
    let cy = rng.random_range(0..h) as isize;
    let cx = rng.random_range(0..w) as isize;
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    (
        clip(cy - (rh / 2) as isize, h),
        clip(cx - (rw / 2) as isize, w),
        clip(cy - (rh / 2) as isize + rh as isize, h),
        clip(cx - (rw / 2) as isize + rw as isize, w),
    )
}

fn erasing_rect<R: Rng + ?Sized>(h: usize, w: usize, area: (f64, f64), aspect: (f64, f64), rng: &mut R) -> Option<Rect> {
    let total = (h * w) as f64;
    for _ in 0..10 {
        let target = sample(rng, area) * total;
        let ratio = sample(rng, (aspect.0.ln(), aspect.1.ln())).exp();
        let rh = (target * ratio).sqrt().round() as usize;
        let rw = (target / ratio).sqrt().round() as usize;
        if rh == 0 || rw == 0 || rh > h || rw > w {
            continue;
        }
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        return Some((y0, x0, y0 + rh, x0 + rw));
    }
    None
}

fn fill_rect<R: Rng + ?Sized>(x: &mut Tensor, rect: Rect, mut value: impl FnMut(&mut R) -> f64, rng: &mut R) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data_mut();
    for ch in 0..c {
        for yy in rect.0..rect.2 {
            for xx in rect.1..rect.3 {
                d[ch * h * w + yy * w + xx] = value(rng);
            }
        }
    }
}

/// Smooth multiplicative field with mean 1.
fn bias_field<R: Rng + ?Sized>(h: usize, w: usize, order: usize, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let mut coeffs = Vec::new();
    for i in 0..=order {
        for j in 0..=order - i {
            let a = if amplitude == 0.0 { 0.0 } else { rng.random_range(-amplitude..amplitude) };
            coeffs.push((i, j, a));
        }
    }
    let norm = |v: usize, n: usize| if n == 1 { 0.0 } else { 2.0 * v as f64 / (n - 1) as f64 - 1.0 };
    let mut field = Vec::with_capacity(h * w);
    for yy in 0..h {
        let u = norm(yy, h);
        for xx in 0..w {
            let v = norm(xx, w);
            let p: f64 = coeffs.iter().map(|&(i, j, a)| a * u.powi(i as i32) * v.powi(j as i32)).sum();
            field.push(p.exp());
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    field.iter_mut().for_each(|f| *f /= mean);
    field
}

/// Per-channel convolution with replicated borders.
fn blur(x: &Tensor, kernel: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = kernel.shape()[0];
    let r = (k / 2) as isize;
    let kd = kernel.data();
    let src = x.data();
    let mut out = x.clone();
    let d = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for i in 0..k {
                    let sy = (yy as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    for j in 0..k {
                        let sx = (xx as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += kd[i * k + j] * plane[sy * w + sx];
                    }
                }
                d[ch * h * w + yy * w + xx] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_pair(seed: u64) -> (Tensor, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[2, 8, 8], (0..128).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
        (x, y)
    }

    fn catalog() -> Vec<AugmentSpec> {
        vec![
            AugmentSpec::Identity,
            AugmentSpec::gaussian_noise(),
            AugmentSpec::GaussianBlur {
                sigma: (0.5, 1.5),
                kernel: 3,
            },
            AugmentSpec::Gamma { gamma: (0.7, 1.4) },
            AugmentSpec::BrightnessContrast {
                brightness: (-0.3, 0.3),
                contrast: (0.5, 2.0),
            },
            AugmentSpec::BiasField {
                order: 3,
                amplitude: 0.5,
            },
            AugmentSpec::RandomErasing {
                area: (0.1, 0.4),
                aspect: (0.3, 3.3),
                fill: EraseFill::Noise,
            },
            AugmentSpec::cutout(),
            AugmentSpec::mixup(),
            AugmentSpec::cutmix(),
            AugmentSpec::Sequence {
                steps: vec![AugmentSpec::gaussian_noise(), AugmentSpec::cutout()],
            },
        ]
    }

    fn run(spec: &AugmentSpec, seed: u64) -> Augmented {
        let (x, y) = sample_pair(1);
        let (x2, y2) = sample_pair(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let partner = spec.needs_partner().then_some((&x2, &y2));
        apply(spec, &x, &y, &mut rng, partner).unwrap()
    }

    #[test]
    fn outputs_in_range_deterministic_and_label_preserving() {
        let (_, y) = sample_pair(1);
        for spec in catalog() {
            for seed in 0..20 {
                let a = run(&spec, seed);
                assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)), "{spec:?}");
                assert_eq!(a, run(&spec, seed));
                if spec.is_intensity_only() {
                    assert_eq!(a.labels, y);
                    assert_eq!(a.mix_weight, None);
                }
            }
        }
    }

    #[test]
    fn identity_and_zero_noise_are_exact() {
        let (x, y) = sample_pair(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply(&AugmentSpec::Identity, &x, &y, &mut rng, None).unwrap();
        assert_eq!((out.image, out.labels, out.mix_weight), (x.clone(), y.clone(), None));
        let zero = AugmentSpec::GaussianNoise { sigma: (0.0, 0.0) };
        assert_eq!(apply(&zero, &x, &y, &mut rng, None).unwrap().image, x);
    }

    #[test]
    fn partner_rules() {
        let (x, y) = sample_pair(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply(&AugmentSpec::mixup(), &x, &y, &mut rng, None).is_err());
        assert!(apply(&AugmentSpec::Identity, &x, &y, &mut rng, Some((&x, &y))).is_err());
    }

    #[test]
    fn mixup_full_weight_returns_primary() {
        let (x, _) = sample_pair(3);
        let (x2, _) = sample_pair(4);
        let out = mixup_with(&x, &x2, 1.0).unwrap();
        assert_eq!(out.image, x);
        assert_eq!(out.mix_weight, Some(1.0));
    }

    #[test]
    fn mixup_target_blends_labels() {
        let out = run(&AugmentSpec::mixup(), 7);
        let lambda = out.mix_weight.unwrap();
        let t = out.target(3).unwrap();
        let n = 64;
        for p in 0..n {
            let col: Vec<f64> = (0..3).map(|c| t.data()[c * n + p]).collect();
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(col[out.labels.data()[p] as usize] >= lambda - 1e-12);
        }
    }

    #[test]
    fn cutmix_conserves_pixels() {
        let (x, y) = sample_pair(1);
        let (x2, y2) = sample_pair(2);
        for seed in 0..30 {
            let out = run(&AugmentSpec::cutmix(), seed);
            let mut from_x = 0;
            for p in 0..64 {
                let own = (0..2).all(|c| out.image.data()[c * 64 + p] == x.data()[c * 64 + p]);
                let other = (0..2).all(|c| out.image.data()[c * 64 + p] == x2.data()[c * 64 + p]);
                assert!(own ^ other);
                let lab = if own { y.data()[p] } else { y2.data()[p] };
                assert_eq!(out.labels.data()[p], lab);
                from_x += own as usize;
            }
            assert_eq!(out.mix_weight, Some(from_x as f64 / 64.0));
        }
    }

    #[test]
    fn sequence_chains_steps() {
        let (x, y) = sample_pair(5);
        let seq = AugmentSpec::Sequence {
            steps: vec![AugmentSpec::gaussian_noise(), AugmentSpec::cutout()],
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let out = apply(&seq, &x, &y, &mut r1, None).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = apply(&AugmentSpec::gaussian_noise(), &x, &y, &mut r2, None).unwrap();
        let b = apply(&AugmentSpec::cutout(), &a.image, &y, &mut r2, None).unwrap();
        assert_eq!(out.image, b.image);
        let empty = AugmentSpec::Sequence { steps: vec![] };
        assert_eq!(apply(&empty, &x, &y, &mut r1, None).unwrap().image, x);
        let mixing = AugmentSpec::Sequence {
            steps: vec![AugmentSpec::mixup()],
        };
        assert!(mixing.validate().is_err());
    }

    #[test]
    fn blur_kernel_cases() {
        assert!(blur_kernel(1.0, 4).is_err());
        let delta = blur_kernel(1e-6, 5).unwrap();
        assert!(delta.data()[12] > 1.0 - 1e-9);
        let k = blur_kernel(1.0, 3).unwrap();
        let d = k.data();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[4] / d[1] - 0.5f64.exp()).abs() < 1e-10);
        assert!((d[4] / d[0] - 1f64.exp()).abs() < 1e-10);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[i * 3 + j], d[j * 3 + i]);
            }
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let x = Tensor::full(&[1, 6, 6], 0.3);
        let out = blur(&x, &blur_kernel(1.3, 5).unwrap());
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn cutout_zeros_a_quarter_sized_square() {
        let x = Tensor::full(&[1, 16, 16], 0.5);
        let y = LabelMap::filled(16, 16, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = apply(&AugmentSpec::cutout(), &x, &y, &mut rng, None).unwrap();
        let zeros = out.image.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0 && zeros <= 16);
    }

    #[test]
    fn bias_field_has_unit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = bias_field(9, 7, 3, 0.5, &mut rng);
        assert!((f.iter().sum::<f64>() / f.len() as f64 - 1.0).abs() < 1e-12);
        assert!(f.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn json_round_trip() {
        for spec in catalog() {
            let s = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<AugmentSpec>(&s).unwrap(), spec);
        }
        let parsed: AugmentSpec = serde_json::from_str(r#"{"kind":"cutout","size":8}"#).unwrap();
        assert_eq!(parsed, AugmentSpec::Cutout { size: Some(8), holes: 1 });
        assert!(serde_json::from_str::<AugmentSpec>(r#"{"kind":"cutout","radius":8}"#).is_err());
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        for bad in [
            AugmentSpec::GaussianNoise { sigma: (0.2, 0.1) },
            AugmentSpec::GaussianBlur {
                sigma: (1.0, 1.0),
                kernel: 4,
            },
            AugmentSpec::Gamma { gamma: (0.0, 1.0) },
            AugmentSpec::Mixup { alpha: 0.0 },
            AugmentSpec::Cutout { size: Some(0), holes: 1 },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
