//! Classification metrics (confusion counts, IoU, threshold sweep) and
//! pixel-detection metrics (ROC, AUC).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::ActivationMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `tp / (tp + fn)`, or 0 without positives.
    pub fn tp_rate(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `tn / (tn + fp)`, or 0 without negatives.
    pub fn tn_rate(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Tallies predicted against true labels (`true` = positive).
pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            format!("{} predictions", labels.len()),
            predictions.len(),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iou {
    pub value: f64,
    /// `tp + fp + fn` was zero; `value` is then 0.
    pub degenerate: bool,
}

pub fn iou_from_counts(c: &ConfusionCounts) -> Iou {
    let denom = c.tp + c.fp + c.fn_;
    Iou {
        value: ratio(c.tp, denom),
        degenerate: denom == 0,
    }
}

/// TP rate, TN rate and IoU of one classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub tp_rate: f64,
    pub tn_rate: f64,
    pub iou: f64,
}

impl ClassificationMetrics {
    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        let preds: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        let counts = confusion(&preds, labels)?;
        Ok(ClassificationMetrics {
            threshold,
            counts,
            tp_rate: counts.tp_rate(),
            tn_rate: counts.tn_rate(),
            iou: iou_from_counts(&counts).value,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub threshold: f64,
    pub iou: f64,
    /// `(threshold, iou)` ascending in threshold.
    pub curve: Vec<(f64, f64)>,
}

/// IoU of "positive iff score ≥ t" at every distinct score plus 0 and 1;
/// ties in IoU go to the larger threshold.
pub fn threshold_sweep(scores: &[f64], labels: &[bool]) -> Result<ThresholdSweep> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores", labels.len()), scores.len()));
    }
    if scores.is_empty() {
        return Err(Error::invalid("threshold sweep over no samples"));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i} is NaN")));
    }
    let mut order: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut thresholds: Vec<f64> = order.iter().map(|p| p.0).chain([0.0, 1.0]).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let total_pos = labels.iter().filter(|&&l| l).count() as u64;
    // Samples below the current threshold, split by label.
    let (mut below_pos, mut below_neg) = (0u64, 0u64);
    let mut next = 0;
    let mut curve = Vec::with_capacity(thresholds.len());
    let mut best = (f64::NAN, -1.0);
    for &t in &thresholds {
        while next < order.len() && order[next].0 < t {
            if order[next].1 {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            next += 1;
        }
        let counts = ConfusionCounts {
            tp: total_pos - below_pos,
            fp: (order.len() as u64 - total_pos) - below_neg,
            tn: below_neg,
            fn_: below_pos,
        };
        let iou = iou_from_counts(&counts).value;
        if iou >= best.1 {
            best = (t, iou);
        }
        curve.push((t, iou));
    }
    Ok(ThresholdSweep {
        threshold: best.0,
        iou: best.1,
        curve,
    })
}

/// Binary pixel ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width || bits.is_empty() {
            return Err(Error::shape(format!("{height}x{width} mask"), bits.len()));
        }
        Ok(Mask { height, width, bits })
    }

    /// Nonzero bytes are foreground.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Mask::new(height, width, bytes.iter().map(|&b| b != 0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resize with the same index rule as
    /// [`crate::maps::resize_nearest`].
    pub fn resize_nearest(&self, target_h: usize, target_w: usize) -> Result<Mask> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::invalid(format!("resize target {target_h}x{target_w} is empty")));
        }
        let mut bits = Vec::with_capacity(target_h * target_w);
        for i in 0..target_h {
            let r = i * self.height / target_h;
            bits.extend((0..target_w).map(|j| self.bits[r * self.width + j * self.width / target_w]));
        }
        Ok(Mask {
            height: target_h,
            width: target_w,
            bits,
        })
    }
}

/// Number of uniform threshold levels `i/255`, `i = 0..=255`.
pub const ROC_LEVELS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Pixels with value ≥ threshold are called positive; `+∞` marks the
    /// `(0, 0)` endpoint.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Ordered from `(0, 0)` to `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RocPooling {
    /// One curve over every pixel of every pair.
    #[default]
    Pooled,
    /// Per-pair curves averaged at each threshold; pairs whose mask is all
    /// one class are skipped.
    PerSample,
}

fn level(i: usize) -> f64 {
    i as f64 / (ROC_LEVELS - 1) as f64
}

/// Highest level index `i` with `level(i) ≤ v`, or `None` below level 0.
fn level_index(v: f64) -> Option<usize> {
    let mut k = (v * (ROC_LEVELS - 1) as f64).floor().clamp(-1.0, (ROC_LEVELS - 1) as f64) as isize;
    while k + 1 < ROC_LEVELS as isize && level((k + 1) as usize) <= v {
        k += 1;
    }
    while k >= 0 && level(k as usize) > v {
        k -= 1;
    }
    (k >= 0).then_some(k as usize)
}

/// Per-level counts of positive and negative pixels; entry `i` counts
/// pixels whose highest reached level is `i`.
#[derive(Clone)]
struct Histogram {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl Histogram {
    fn new() -> Self {
        Histogram {
            pos: vec![0; ROC_LEVELS],
            neg: vec![0; ROC_LEVELS],
        }
    }

    fn add(&mut self, map: &ActivationMap, mask: &Mask) -> Result<()> {
        if (map.height(), map.width()) != (mask.height, mask.width) {
            return Err(Error::shape(
                format!("{}x{} map", mask.height, mask.width),
                format!("{}x{}", map.height(), map.width()),
            ));
        }
        for (&v, &b) in map.values().iter().zip(&mask.bits) {
            if v.is_nan() {
                return Err(Error::NonFinite("activation map holds NaN".into()));
            }
            if let Some(k) = level_index(v as f64) {
                if b {
                    self.pos[k] += 1;
                } else {
                    self.neg[k] += 1;
                }
            }
        }
        Ok(())
    }

    fn totals(&self, pairs: &[(&ActivationMap, &Mask)]) -> (u64, u64) {
        let p: u64 = pairs.iter().map(|(_, m)| m.count() as u64).sum();
        let all: u64 = pairs.iter().map(|(_, m)| m.bits.len() as u64).sum();
        (p, all - p)
    }

    fn curve(&self, total_pos: u64, total_neg: u64) -> RocCurve {
        let mut points = vec![RocPoint {
            threshold: f64::INFINITY,
            fpr: 0.0,
            tpr: 0.0,
        }];
        let (mut tp, mut fp) = (0u64, 0u64);
        for i in (0..ROC_LEVELS).rev() {
            tp += self.pos[i];
            fp += self.neg[i];
            points.push(RocPoint {
                threshold: level(i),
                fpr: fp as f64 / total_neg as f64,
                tpr: tp as f64 / total_pos as f64,
            });
        }
        // Pixels below level 0 are never called positive; the curve still
        // ends at (1, 1).
        if let Some(last) = points.last() {
            if last.fpr != 1.0 || last.tpr != 1.0 {
                points.push(RocPoint {
                    threshold: f64::NEG_INFINITY,
                    fpr: 1.0,
                    tpr: 1.0,
                });
            }
        }
        let auc = trapezoid(&points);
        RocCurve { points, auc }
    }
}

fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// ROC over `maps` against same-sized `truths`, thresholds at the 256 uniform
/// levels of `[0, 1]` plus the `(0, 0)` and `(1, 1)` endpoints, AUC by the
/// trapezoid rule.
pub fn roc_auc(maps: &[ActivationMap], truths: &[Mask], pooling: RocPooling) -> Result<RocCurve> {
    if maps.len() != truths.len() {
        return Err(Error::shape(format!("{} maps", truths.len()), maps.len()));
    }
    if maps.is_empty() {
        return Err(Error::invalid("ROC over no maps"));
    }
    let pairs: Vec<(&ActivationMap, &Mask)> = maps.iter().zip(truths).collect();
    match pooling {
        RocPooling::Pooled => {
            let mut h = Histogram::new();
            for (m, t) in &pairs {
                h.add(m, t)?;
            }
            let (p, n) = h.totals(&pairs);
            if p == 0 || n == 0 {
                return Err(Error::invalid(format!(
                    "ROC needs positive and negative pixels; pooled truth has {p} positive, {n} negative"
                )));
            }
            Ok(h.curve(p, n))
        }
        RocPooling::PerSample => {
            let mut curves = Vec::new();
            for pair in &pairs {
                let mut h = Histogram::new();
                h.add(pair.0, pair.1)?;
                let (p, n) = h.totals(std::slice::from_ref(pair));
                if p > 0 && n > 0 {
                    curves.push(h.curve(p, n));
                }
            }
            if curves.is_empty() {
                return Err(Error::invalid("no map/mask pair has both positive and negative pixels"));
            }
            let k = curves.len() as f64;
            let auc = curves.iter().map(|c| c.auc).sum::<f64>() / k;
            let len = curves.iter().map(|c| c.points.len()).max().unwrap_or(0);
            let points = (0..len)
                .map(|i| {
                    let at = |c: &RocCurve| *c.points.get(i).unwrap_or(c.points.last().expect("nonempty curve"));
                    RocPoint {
                        threshold: at(&curves[0]).threshold,
                        fpr: curves.iter().map(|c| at(c).fpr).sum::<f64>() / k,
                        tpr: curves.iter().map(|c| at(c).tpr).sum::<f64>() / k,
                    }
                })
                .collect();
            Ok(RocCurve { points, auc })
        }
    }
}

/// Indices of positive samples every model predicts positive.
pub fn common_tp_set(predictions: &[&[bool]], labels: &[bool]) -> Result<Vec<usize>> {
    for (m, p) in predictions.iter().enumerate() {
        if p.len() != labels.len() {
            return Err(Error::shape(
                format!("{} predictions for model {m}", labels.len()),
                p.len(),
            ));
        }
    }
    Ok((0..labels.len())
        .filter(|&i| labels[i] && predictions.iter().all(|p| p[i]))
        .collect())
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    s
}

pub fn sweep_csv(sweep: &ThresholdSweep) -> String {
    let mut s = String::from("threshold,iou\n");
    for (t, iou) in &sweep.curve {
        let _ = writeln!(s, "{t},{iou}");
    }
    s
}

/// One row per model, columns as `model,tp_rate,tn_rate,iou,threshold`.
pub fn metrics_csv(rows: &[(String, ClassificationMetrics)]) -> String {
    let mut s = String::from("model,tp_rate,tn_rate,iou,threshold\n");
    for (name, m) in rows {
        let _ = writeln!(s, "{name},{:.6},{:.6},{:.6},{}", m.tp_rate, m.tn_rate, m.iou, m.threshold);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_basic() {
        let c = confusion(&[true, true, false, false], &[true, false, false, true]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let all_pos = confusion(&[true; 5], &[false; 5]).unwrap();
        assert_eq!((all_pos.tp, all_pos.fp), (0, 5));
        assert!(confusion(&[true], &[]).is_err());
    }

    #[test]
    fn iou_cases() {
        let c = ConfusionCounts { tp: 5, fp: 3, tn: 0, fn_: 2 };
        assert_eq!(iou_from_counts(&c).value, 0.5);
        let perfect = ConfusionCounts { tp: 4, fp: 0, tn: 9, fn_: 0 };
        assert_eq!(iou_from_counts(&perfect).value, 1.0);
        let empty = iou_from_counts(&ConfusionCounts { tn: 3, ..Default::default() });
        assert!(empty.degenerate);
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn sweep_separated_and_constant() {
        let s = threshold_sweep(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(s.iou, 1.0);
        assert_eq!(s.threshold, 0.8);
        let c = threshold_sweep(&[0.4; 4], &[true, false, false, true]).unwrap();
        assert_eq!(c.iou, 0.5);
    }

    #[test]
    fn level_indexing() {
        assert_eq!(level_index(0.0), Some(0));
        assert_eq!(level_index(1.0), Some(255));
        assert_eq!(level_index(-0.1), None);
        assert_eq!(level_index(level(17)), Some(17));
        assert_eq!(level_index(level(17) - 1e-12), Some(16));
    }

    #[test]
    fn roc_perfect_and_constant() {
        let mask = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let perfect = ActivationMap::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = roc_auc(&[perfect], std::slice::from_ref(&mask), RocPooling::Pooled).unwrap();
        assert_eq!(r.auc, 1.0);
        let flat = ActivationMap::new(2, 2, vec![0.3; 4]).unwrap();
        let r = roc_auc(&[flat], &[mask], RocPooling::Pooled).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!((r.points[0].fpr, r.points[0].tpr), (0.0, 0.0));
        let last = r.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn roc_rejects_single_class_truth() {
        let m = ActivationMap::new(1, 2, vec![0.1, 0.2]).unwrap();
        let t = Mask::new(1, 2, vec![false, false]).unwrap();
        assert!(roc_auc(&[m], &[t], RocPooling::Pooled).is_err());
    }

    #[test]
    fn mask_upsample_blocks() {
        let m = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let r = m.resize_nearest(4, 4).unwrap();
        assert_eq!(r.count(), 8);
        assert!(r.bits()[0] && r.bits()[5] && !r.bits()[2] && r.bits()[15]);
    }

    #[test]
    fn common_tp_cases() {
        let labels = [true, true, false, true];
        let a = [true, true, true, false];
        let b = [true, false, true, false];
        assert_eq!(common_tp_set(&[&a, &b], &labels).unwrap(), vec![0]);
        assert!(common_tp_set(&[&[false; 4]], &labels).unwrap().is_empty());
        assert_eq!(common_tp_set(&[&labels], &labels).unwrap(), vec![0, 1, 3]);
        assert!(common_tp_set(&[&[true]], &labels).is_err());
    }

    #[test]
    fn csv_headers() {
        let s = threshold_sweep(&[0.2, 0.7], &[false, true]).unwrap();
        assert!(sweep_csv(&s).starts_with("threshold,iou\n0,"));
        let m = ClassificationMetrics::at_threshold(&[0.2, 0.7], &[false, true], 0.5).unwrap();
        let t = metrics_csv(&[("fbnet".into(), m)]);
        assert_eq!(t.lines().nth(1).unwrap(), "fbnet,1.000000,1.000000,1.000000,0.5");
    }
}
