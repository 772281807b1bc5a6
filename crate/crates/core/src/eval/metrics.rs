use serde::{Deserialize, Serialize};

use super::hungarian::hungarian_match;
use crate::error::Result;
use crate::geometry::rect_iou;
use crate::mask::BinaryMask;

pub const PRECISION_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

/// IoU of two masks; two empty masks score 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.iou(b)
}

/// Rectangle IoU strictly above one half.
pub fn box_prec_at_half(pred: [f64; 4], gt: [f64; 4]) -> bool {
    rect_iou(pred, gt) > 0.5
}

/// Running sums for cIoU and the per-sample IoU list behind mIoU and P@t.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub sum_intersection: u64,
    pub sum_union: u64,
    pub per_sample_ious: Vec<f64>,
    pub unmatched_pred: u64,
    pub unmatched_gt: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one scored pair from its pixel counts.
    pub fn add_counts(&mut self, intersection: u64, union: u64) {
        debug_assert!(intersection <= union);
        self.sum_intersection += intersection;
        self.sum_union += union;
        self.per_sample_ious
            .push(if union == 0 { 1.0 } else { intersection as f64 / union as f64 });
    }

    pub fn accumulate_single(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
        let (i, u) = pred.overlap_counts(gt)?;
        self.add_counts(i, u);
        Ok(())
    }

    /// Scores the Hungarian-matched pairs of one sample; unmatched masks on
    /// either side are counted but do not enter the IoU sums.
    pub fn accumulate_multi(&mut self, preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Vec<(usize, usize)>> {
        let mut counts = Vec::with_capacity(preds.len());
        for p in preds {
            counts.push(gts.iter().map(|g| p.overlap_counts(g)).collect::<Result<Vec<_>>>()?);
        }
        let iou: Vec<Vec<f64>> = counts
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
                    .collect()
            })
            .collect();
        let pairs = hungarian_match(&iou).pairs;
        for &(p, g) in &pairs {
            let (i, u) = counts[p][g];
            self.add_counts(i, u);
        }
        self.unmatched_pred += (preds.len() - pairs.len()) as u64;
        self.unmatched_gt += (gts.len() - pairs.len()) as u64;
        Ok(pairs)
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.sum_intersection += other.sum_intersection;
        self.sum_union += other.sum_union;
        self.per_sample_ious.extend_from_slice(&other.per_sample_ious);
        self.unmatched_pred += other.unmatched_pred;
        self.unmatched_gt += other.unmatched_gt;
    }

    pub fn samples(&self) -> usize {
        self.per_sample_ious.len()
    }

    /// Mean per-sample IoU; 0 when nothing was scored.
    pub fn miou(&self) -> f64 {
        if self.per_sample_ious.is_empty() {
            0.0
        } else {
            self.per_sample_ious.iter().sum::<f64>() / self.per_sample_ious.len() as f64
        }
    }

    /// Total intersection over total union; 1 when every union was empty
    /// and at least one sample was scored.
    pub fn ciou(&self) -> f64 {
        if self.sum_union == 0 {
            if self.per_sample_ious.is_empty() {
                0.0
            } else {
                1.0
            }
        } else {
            self.sum_intersection as f64 / self.sum_union as f64
        }
    }

    /// Fraction of samples with IoU strictly above `t`.
    pub fn precision_at(&self, t: f64) -> f64 {
        if self.per_sample_ious.is_empty() {
            return 0.0;
        }
        let hits = self.per_sample_ious.iter().filter(|&&v| v > t).count();
        hits as f64 / self.per_sample_ious.len() as f64
    }
}
