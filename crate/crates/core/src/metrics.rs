//! Overlap and surface-distance metrics for 2-D label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::LabelMap;

/// Binary foreground mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("Mask::new", format!("{height}×{width} mask with {} cells", data.len())));
        }
        Ok(Mask { height, width, data })
    }

    pub fn from_labels(labels: &LabelMap, class: u8) -> Self {
        Mask {
            height: labels.height(),
            width: labels.width(),
            data: labels.data().iter().map(|&l| l == class).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.data[y as usize * self.width + x as usize]
    }

    /// Foreground pixels with a 4-neighbour outside the mask. Pixels beyond
    /// the image edge count as background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let (yi, xi) = (y as isize, x as isize);
                if self.at(yi, xi)
                    && !(self.at(yi - 1, xi) && self.at(yi + 1, xi) && self.at(yi, xi - 1) && self.at(yi, xi + 1))
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                left: vec![pred.height, pred.width],
                right: vec![gt.height, gt.width],
            });
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
}

/// `num / den`, or the vacuous-case value when `den` is zero: 1 if both
/// compared sets are empty, 0 otherwise.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl OverlapMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let pred_pos = c.tp + c.fp;
        let gt_pos = c.tp + c.fn_;
        let both_empty = pred_pos == 0 && gt_pos == 0;
        let both_full = c.tn + c.fn_ == 0 && c.tn + c.fp == 0;
        OverlapMetrics {
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both_empty),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, both_empty),
            acc: ratio(c.tp + c.tn, c.total(), true),
            pre: ratio(c.tp, pred_pos, both_empty),
            sen: ratio(c.tp, gt_pos, both_empty),
            spe: ratio(c.tn, c.tn + c.fp, both_full),
        }
    }
}

pub fn overlap_metrics(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<OverlapMetrics> {
    let c = ConfusionCounts::from_masks(&Mask::from_labels(pred, class), &Mask::from_labels(gt, class))?;
    Ok(OverlapMetrics::from_counts(&c))
}

/// Mean hard Dice over classes `1..num_classes`.
pub fn mean_foreground_dice(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::invalid("mean_foreground_dice", "need a foreground class"));
    }
    let mut sum = 0.0;
    for k in 1..num_classes {
        sum += overlap_metrics(pred, gt, k as u8)?.dice;
    }
    Ok(sum / (num_classes - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
}

/// Symmetric boundary distances in physical units. `None` when either mask
/// is empty, where the distances are undefined.
pub fn surface_distances(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Result<Option<SurfaceDistances>> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            op: "surface_distances",
            left: vec![pred.height, pred.width],
            right: vec![gt.height, gt.width],
        });
    }
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::invalid("surface_distances", "spacing must be positive"));
    }
    if pred.is_empty() || gt.is_empty() {
        return Ok(None);
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let to_gt = DistanceField::new(gt.dims(), &bg, spacing);
    let to_pred = DistanceField::new(pred.dims(), &bp, spacing);
    let mut pooled: Vec<f64> = bp.iter().map(|&p| to_gt.at(p)).chain(bg.iter().map(|&p| to_pred.at(p))).collect();
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    pooled.sort_by(f64::total_cmp);
    Ok(Some(SurfaceDistances {
        hd95: percentile_sorted(&pooled, 95.0),
        asd,
    }))
}

/// Linear-interpolated percentile of ascending data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Exact Euclidean distance to a point set, via two separable
/// lower-envelope passes over squared distances.
struct DistanceField {
    width: usize,
    sq: Vec<f64>,
}

impl DistanceField {
    fn new((h, w): (usize, usize), sites: &[(usize, usize)], (sy, sx): (f64, f64)) -> Self {
        let mut grid = vec![f64::INFINITY; h * w];
        for &(y, x) in sites {
            grid[y * w + x] = 0.0;
        }
        let mut col = vec![0.0; h];
        for x in 0..w {
            for y in 0..h {
                col[y] = grid[y * w + x];
            }
            let d = envelope_1d(&col, sy * sy);
            for y in 0..h {
                grid[y * w + x] = d[y];
            }
        }
        for y in 0..h {
            let d = envelope_1d(&grid[y * w..(y + 1) * w], sx * sx);
            grid[y * w..(y + 1) * w].copy_from_slice(&d);
        }
        DistanceField { width: w, sq: grid }
    }

    fn at(&self, (y, x): (usize, usize)) -> f64 {
        self.sq[y * self.width + x].sqrt()
    }
}

/// `d[p] = min_q f[q] + scale·(p − q)²` by the Felzenszwalb–Huttenlocher
/// lower envelope of parabolas. Infinite sites are skipped.
fn envelope_1d(f: &[f64], scale: f64) -> Vec<f64> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + scale * qf * qf) - (f[p] + scale * pf * pf)) / (2.0 * scale * (qf - pf))
    };
    for &q in &sites {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = intersect(q, p);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let d = p as f64 - q as f64;
        *o = f[q] + scale * d * d;
    }
    out
}

/// One row of a per-sample metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: String,
    pub class: u8,
    pub dice: f64,
    pub iou: f64,
    /// `None` when either mask is empty for this class.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
}

impl MetricRecord {
    pub fn evaluate(
        sample_id: impl Into<String>,
        pred: &LabelMap,
        gt: &LabelMap,
        class: u8,
        spacing: (f64, f64),
    ) -> Result<Self> {
        let o = overlap_metrics(pred, gt, class)?;
        let s = surface_distances(&Mask::from_labels(pred, class), &Mask::from_labels(gt, class), spacing)?;
        Ok(MetricRecord {
            sample_id: sample_id.into(),
            class,
            dice: o.dice,
            iou: o.iou,
            hd95: s.map(|s| s.hd95),
            asd: s.map(|s| s.asd),
            acc: o.acc,
            pre: o.pre,
            sen: o.sen,
            spe: o.spe,
        })
    }
}

/// Per-class means. Surface metrics average over samples where defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: u8,
    pub dice: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub iou: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
    pub samples: usize,
    pub surface_samples: usize,
}

pub fn summarize(records: &[MetricRecord]) -> Vec<ClassSummary> {
    let mut classes: Vec<u8> = records.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|class| {
            let rs: Vec<&MetricRecord> = records.iter().filter(|r| r.class == class).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&MetricRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let surf: Vec<(f64, f64)> = rs.iter().filter_map(|r| Some((r.hd95?, r.asd?))).collect();
            let m = surf.len();
            ClassSummary {
                class,
                dice: mean(|r| r.dice),
                hd95: (m > 0).then(|| surf.iter().map(|s| s.0).sum::<f64>() / m as f64),
                asd: (m > 0).then(|| surf.iter().map(|s| s.1).sum::<f64>() / m as f64),
                iou: mean(|r| r.iou),
                acc: mean(|r| r.acc),
                pre: mean(|r| r.pre),
                sen: mean(|r| r.sen),
                spe: mean(|r| r.spe),
                samples: rs.len(),
                surface_samples: m,
            }
        })
        .collect()
}

pub const CSV_HEADER: &str = "class,dice,hd95,asd,iou,acc,pre,sen,spe,samples,surface_samples";

/// Aggregate CSV with columns in the order Dice, HD95, ASD, IoU, Acc, Pre,
/// Sen, Spe. Undefined surface metrics are written as `NA`.
pub fn summary_csv(summaries: &[ClassSummary]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            s.class,
            s.dice,
            opt(s.hd95),
            opt(s.asd),
            s.iou,
            s.acc,
            s.pre,
            s.sen,
            s.spe,
            s.samples,
            s.surface_samples
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(h: usize, w: usize, cells: &[(usize, usize)]) -> Mask {
        let mut d = vec![false; h * w];
        for &(y, x) in cells {
            d[y * w + x] = true;
        }
        Mask::new(h, w, d).unwrap()
    }

    fn labels(m: &Mask) -> LabelMap {
        LabelMap::new(m.height, m.width, m.data.iter().map(|&b| b as u8).collect()).unwrap()
    }

    #[test]
    fn perfect_and_disjoint_overlap() {
        let a = mask_from(4, 4, &[(0, 0), (1, 1)]);
        let b = mask_from(4, 4, &[(3, 3)]);
        let same = overlap_metrics(&labels(&a), &labels(&a), 1).unwrap();
        assert_eq!((same.dice, same.iou), (1.0, 1.0));
        let disjoint = overlap_metrics(&labels(&a), &labels(&b), 1).unwrap();
        assert_eq!((disjoint.dice, disjoint.iou), (0.0, 0.0));
    }

    #[test]
    fn partial_overlap_counts() {
        // pred: 4 px inside gt's 8 px.
        let gt: Vec<(usize, usize)> = (0..2).flat_map(|y| (0..4).map(move |x| (y, x))).collect();
        let pred = &gt[..4];
        let m = overlap_metrics(&labels(&mask_from(4, 4, pred)), &labels(&mask_from(4, 4, &gt)), 1).unwrap();
        assert_eq!(m.dice, 2.0 / 3.0);
        assert_eq!(m.iou, 0.5);
        assert_eq!(m.pre, 1.0);
        assert_eq!(m.sen, 0.5);
        assert_eq!(m.acc, 12.0 / 16.0);
        assert_eq!(m.spe, 1.0);
    }

    #[test]
    fn empty_class_conventions() {
        let empty = LabelMap::filled(3, 3, 0);
        let m = overlap_metrics(&empty, &empty, 1).unwrap();
        assert_eq!((m.dice, m.iou, m.pre, m.sen), (1.0, 1.0, 1.0, 1.0));
        let one = labels(&mask_from(3, 3, &[(1, 1)]));
        let m = overlap_metrics(&empty, &one, 1).unwrap();
        assert_eq!((m.dice, m.iou, m.pre, m.sen), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn surface_distance_cases() {
        let a = mask_from(5, 5, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert_eq!(
            surface_distances(&a, &a, (1.0, 1.0)).unwrap(),
            Some(SurfaceDistances { hd95: 0.0, asd: 0.0 })
        );
        let p = mask_from(1, 6, &[(0, 1)]);
        let q = mask_from(1, 6, &[(0, 4)]);
        let s = surface_distances(&p, &q, (1.0, 1.0)).unwrap().unwrap();
        assert_eq!((s.hd95, s.asd), (3.0, 3.0));
        let scaled = surface_distances(&p, &q, (2.0, 0.5)).unwrap().unwrap();
        assert_eq!(scaled.asd, 1.5);
        let empty = mask_from(5, 5, &[]);
        assert_eq!(surface_distances(&a, &empty, (1.0, 1.0)).unwrap(), None);
        assert!(surface_distances(&a, &p, (1.0, 1.0)).is_err());
    }

    #[test]
    fn boundary_excludes_interior() {
        let cells: Vec<(usize, usize)> = (0..3).flat_map(|y| (0..3).map(move |x| (y + 1, x + 1))).collect();
        let b = mask_from(5, 5, &cells).boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        // Edge of the image counts as background.
        assert_eq!(mask_from(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]).boundary().len(), 4);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 50.0), 2.0);
        assert!((percentile_sorted(&v, 95.0) - 3.8).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn csv_column_order() {
        let gt = labels(&mask_from(4, 4, &[(1, 1), (1, 2)]));
        let r = MetricRecord::evaluate("s", &gt, &gt, 1, (1.0, 1.0)).unwrap();
        let csv = summary_csv(&summarize(&[r]));
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert!(lines.next().unwrap().starts_with("1,1.000000,0.000000,0.000000,1.000000"));
    }
}
