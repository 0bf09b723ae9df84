//! Pixel confusion counts, overlap scores and ROC analysis.

use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use core::ops::{Add, AddAssign};

use crate::error::{Error, Result};

/// Decision threshold on road probability.
pub const THRESHOLD: f64 = 0.5;
pub const DEFAULT_ROC_THRESHOLDS: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Ratio with the empty-set convention: `1` when prediction and ground truth
/// are both empty, `0` for any other zero denominator.
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

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// Adds the comparison of two `{0,1}` masks.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape {
                op: "accumulate",
                expected: [gt.len(), 1, 1, 1],
                got: [pred.len(), 1, 1, 1],
            });
        }
        let mut c = [0u64; 4];
        for (&p, &g) in pred.iter().zip(gt) {
            c[((p != 0) as usize) << 1 | (g != 0) as usize] += 1;
        }
        // index = pred * 2 + gt
        self.tn += c[0];
        self.fn_ += c[1];
        self.fp += c[2];
        self.tp += c[3];
        Ok(())
    }

    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        let mut c = Self::default();
        c.accumulate(pred, gt)?;
        Ok(c)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, self.both_empty())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.both_empty())
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.both_empty())
    }

    /// Harmonic mean of precision and recall.
    pub fn f1(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// `2 TP / (2 TP + FP + FN)`, algebraically equal to [`f1`](Self::f1).
    pub fn f1_counts(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, self.both_empty())
    }

    pub fn scores(&self) -> Scores {
        Scores {
            iou: self.iou(),
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro (pooled counts) and per-image-mean aggregation side by side.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub pooled: ConfusionCounts,
    per_image: Vec<Scores>,
}

impl Evaluation {
    pub fn add_image(&mut self, c: ConfusionCounts) {
        self.pooled += c;
        self.per_image.push(c.scores());
    }

    pub fn images(&self) -> usize {
        self.per_image.len()
    }

    pub fn micro(&self) -> Scores {
        self.pooled.scores()
    }

    pub fn per_image_mean(&self) -> Scores {
        let n = self.per_image.len().max(1) as f64;
        let mut s = Scores::default();
        for x in &self.per_image {
            s.iou += x.iou / n;
            s.precision += x.precision / n;
            s.recall += x.recall / n;
            s.f1 += x.f1 / n;
        }
        s
    }
}

/// Binarizes probabilities at [`THRESHOLD`] (inclusive).
pub fn threshold_mask<T: Copy + Into<f64>>(prob: &[T]) -> Vec<u8> {
    prob.iter().map(|&p| (p.into() >= THRESHOLD) as u8).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// Descending thresholds with `(0,0)` and `(1,1)` endpoints attached;
    /// the endpoints carry thresholds `+inf` and `-inf`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps `n_thresholds` uniform thresholds `1, ..., 0`; a pixel is positive
/// when its probability is at least the threshold. The area uses the
/// trapezoid rule over the full polyline.
pub fn roc_auc(prob: &[f64], gt: &[u8], n_thresholds: usize) -> Result<RocCurve> {
    if n_thresholds < 2 {
        return Err(Error::Invalid(alloc::format!("need at least 2 thresholds, got {n_thresholds}")));
    }
    if prob.len() != gt.len() {
        return Err(Error::Shape {
            op: "roc_auc",
            expected: [gt.len(), 1, 1, 1],
            got: [prob.len(), 1, 1, 1],
        });
    }
    let pos = gt.iter().filter(|&&g| g != 0).count();
    let neg = gt.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::RocUndefined);
    }
    // histogram of scores into threshold bins: bin i holds p in [t_i, t_{i-1})
    let last = (n_thresholds - 1) as f64;
    let thresholds: Vec<f64> = (0..n_thresholds).map(|i| (n_thresholds - 1 - i) as f64 / last).collect();
    let mut pos_hits = alloc::vec![0u64; n_thresholds];
    let mut neg_hits = alloc::vec![0u64; n_thresholds];
    for (&p, &g) in prob.iter().zip(gt) {
        // first i with t_i <= p
        let mut i = ((1.0 - p) * last).floor().clamp(0.0, last) as usize;
        while i > 0 && thresholds[i - 1] <= p {
            i -= 1;
        }
        while i < n_thresholds && thresholds[i] > p {
            i += 1;
        }
        if i == n_thresholds {
            continue;
        }
        if g != 0 {
            pos_hits[i] += 1;
        } else {
            neg_hits[i] += 1;
        }
    }
    let mut points = Vec::with_capacity(n_thresholds + 2);
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    });
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in 0..n_thresholds {
        tp += pos_hits[i];
        fp += neg_hits[i];
        points.push(RocPoint {
            threshold: thresholds[i],
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
        .sum();
    Ok(RocCurve { points, auc })
}
