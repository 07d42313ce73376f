//! Confusion-matrix bookkeeping and the segmentation metrics derived from
//! it: per-class accuracy (recall), per-class IoU, and macro or
//! frequency-weighted mIoU. Metric math runs in f64 regardless of the
//! engine's scalar type so reports do not depend on the build mode.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground-truth class indices for one image, with an optional ignore label
/// that is excluded from losses and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelTargets {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    ignore_index: Option<u8>,
}

impl PixelTargets {
    pub fn new(h: usize, w: usize, labels: Vec<u8>, ignore_index: Option<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "mask has {} labels, expected {}x{}",
                labels.len(),
                h,
                w
            )));
        }
        Ok(PixelTargets {
            h,
            w,
            labels,
            ignore_index,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn ignore_index(&self) -> Option<u8> {
        self.ignore_index
    }

    pub fn set_ignore_index(&mut self, ignore: Option<u8>) {
        self.ignore_index = ignore;
    }

    pub fn is_ignored(&self, label: u8) -> bool {
        Some(label) == self.ignore_index
    }

    /// Checks that every non-ignored label is a valid class index.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if !self.is_ignored(l) && (l as usize) >= num_classes {
                return Err(Error::Data(format!(
                    "mask label {l} at pixel {i} exceeds class count {num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// Per-pixel targets for the loss ops: class index, or -1 when ignored.
    pub fn loss_targets(&self, num_classes: usize) -> Result<Arc<Vec<i32>>> {
        self.validate_classes(num_classes)?;
        Ok(Arc::new(
            self.labels
                .iter()
                .map(|&l| if self.is_ignored(l) { -1 } else { l as i32 })
                .collect(),
        ))
    }
}

/// Per-pixel argmax of a [C,H,W] prediction, ties resolved to the lowest
/// class index.
pub fn argmax_channels(pred: &Tensor) -> Vec<u8> {
    let shape = pred.shape();
    assert_eq!(shape.len(), 3, "argmax_channels expects [C,H,W]");
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let data = pred.data();
    (0..hw)
        .map(|p| {
            let mut best = 0usize;
            for ch in 1..c {
                if data[ch * hw + p] > data[best * hw + p] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}

/// C x C matrix of pixel counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

/// Averaging scheme for [`ConfusionMatrix::miou`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiouMode {
    /// Unweighted mean over present classes.
    Macro,
    /// Per-class IoU weighted by that class's share of target pixels.
    FrequencyWeighted,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Directly supplied counts, for fixtures and shard merging tests.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape(format!(
                "confusion matrix needs {0}x{0} counts",
                num_classes
            )));
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts,
        })
    }

    /// Tallies one image's argmax predictions against its targets; ignored
    /// pixels contribute nothing.
    pub fn accumulate(&mut self, pred_labels: &[u8], targets: &PixelTargets) -> Result<()> {
        let (h, w) = targets.size();
        if pred_labels.len() != h * w {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, targets {}x{}",
                pred_labels.len(),
                h,
                w
            )));
        }
        for (&p, &t) in pred_labels.iter().zip(targets.labels()) {
            if targets.is_ignored(t) {
                continue;
            }
            if (t as usize) >= self.num_classes || (p as usize) >= self.num_classes {
                return Err(Error::Data(format!(
                    "label out of range: true {t}, predicted {p}, classes {}",
                    self.num_classes
                )));
            }
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Adds another shard's counts into this matrix.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class: TP / (TP + FP + FN); `None` marks absent classes
    /// (zero union) which stay out of macro averages.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..self.num_classes)
                    .filter(|&t| t != c)
                    .map(|t| self.count(t, c))
                    .sum();
                let fn_: u64 = (0..self.num_classes)
                    .filter(|&p| p != c)
                    .map(|p| self.count(c, p))
                    .sum();
                let union = tp + fp + fn_;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Per-class recall: diagonal over row sum; `None` when the class has no
    /// target pixels.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let row: u64 = (0..self.num_classes).map(|p| self.count(c, p)).sum();
                if row == 0 {
                    None
                } else {
                    Some(self.count(c, c) as f64 / row as f64)
                }
            })
            .collect()
    }

    /// Target-pixel count per class (row sums).
    pub fn class_pixels(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|c| (0..self.num_classes).map(|p| self.count(c, p)).sum())
            .collect()
    }

    pub fn miou(&self, mode: MiouMode) -> Result<f64> {
        let ious = self.per_class_iou();
        match mode {
            MiouMode::Macro => macro_mean(&ious).ok_or_else(|| {
                Error::Degenerate("mIoU undefined: no class is present".to_string())
            }),
            MiouMode::FrequencyWeighted => {
                let pixels = self.class_pixels();
                let total: u64 = pixels.iter().sum();
                if total == 0 {
                    return Err(Error::Degenerate(
                        "mIoU undefined: no scored pixels".to_string(),
                    ));
                }
                let weights: Vec<f64> =
                    pixels.iter().map(|&p| p as f64 / total as f64).collect();
                Ok(frequency_weighted_mean(&ious, &weights))
            }
        }
    }
}

/// Unweighted mean over the present (`Some`) entries; `None` when all are
/// absent.
pub fn macro_mean(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Sum of weight * value over present entries. Absent entries carry zero
/// weight by construction (no target pixels).
pub fn frequency_weighted_mean(values: &[Option<f64>], weights: &[f64]) -> f64 {
    values
        .iter()
        .zip(weights)
        .filter_map(|(v, w)| v.map(|v| v * w))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn targets(h: usize, w: usize, labels: Vec<u8>) -> PixelTargets {
        PixelTargets::new(h, w, labels, None).unwrap()
    }

    #[test]
    fn identical_masks_are_diagonal() {
        let t = targets(2, 2, vec![0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 1], &t).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(2, 2), 1);
        assert_eq!(cm.total(), 4);
        assert!(cm.per_class_iou().iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn ignored_pixels_leave_matrix_unchanged() {
        let t = PixelTargets::new(2, 2, vec![255; 4], Some(255)).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 0], &t).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn out_of_range_labels_error() {
        let t = targets(1, 2, vec![0, 5]);
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(
            cm.accumulate(&[0, 0], &t),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn accumulate_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let preds: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let t = targets(4, 4, labels.clone());
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&preds, &t).unwrap();
        let mut tally = [[0u64; 3]; 3];
        for (&p, &l) in preds.iter().zip(&labels) {
            tally[l as usize][p as usize] += 1;
        }
        for truth in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.count(truth, p), tally[truth][p]);
            }
        }
    }

    #[test]
    fn iou_by_hand() {
        // counts [[2,1],[1,2]]: each class has TP 2, FP 1, FN 1.
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(0.5), Some(0.5)]);
    }

    #[test]
    fn disjoint_prediction_has_zero_iou() {
        let t = targets(1, 2, vec![1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0], &t).unwrap();
        assert_eq!(cm.per_class_iou()[1], Some(0.0));
    }

    #[test]
    fn accuracy_by_hand_and_absent() {
        let cm = ConfusionMatrix::from_counts(3, vec![3, 1, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        let acc = cm.per_class_accuracy();
        assert_eq!(acc[0], Some(0.75));
        assert_eq!(acc[1], Some(1.0));
        assert_eq!(acc[2], None);
        // Absent class is excluded from the macro mean.
        assert_eq!(macro_mean(&acc), Some(0.875));
    }

    #[test]
    fn miou_modes() {
        let cm = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 5]).unwrap();
        assert_eq!(cm.miou(MiouMode::Macro).unwrap(), 1.0);
        assert_eq!(cm.miou(MiouMode::FrequencyWeighted).unwrap(), 1.0);

        let empty = ConfusionMatrix::new(2);
        assert!(matches!(
            empty.miou(MiouMode::Macro),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn frequency_weighting_formula() {
        let got = frequency_weighted_mean(&[Some(1.0), Some(0.0)], &[0.9, 0.1]);
        assert!((got - 0.9).abs() < 1e-12);
    }

    #[test]
    fn reported_per_class_column_macro_mean() {
        // Ten per-class IoU values averaging 0.611, deliberately far from a
        // frequency-weighted summary dominated by large classes.
        let column = [0.97, 0.94, 0.69, 0.60, 0.44, 0.37, 0.90, 0.43, 0.60, 0.17];
        let wrapped: Vec<Option<f64>> = column.iter().map(|&v| Some(v)).collect();
        let mean = macro_mean(&wrapped).unwrap();
        assert!((mean - 0.611).abs() < 1e-3, "{mean}");
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let pred = Tensor::new(&[3, 1, 2], vec![0.4, 0.2, 0.4, 0.5, 0.2, 0.3]).unwrap();
        assert_eq!(argmax_channels(&pred), vec![0, 1]);
    }

    /// Set-arithmetic oracle over random mask pairs: intersection and union
    /// computed per class from raw pixel sets.
    #[test]
    fn metrics_match_set_arithmetic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let h = rng.random_range(1..=8usize);
            let w = rng.random_range(1..=8usize);
            let c = rng.random_range(2..=5usize);
            let truth: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..c as u8)).collect();
            let pred: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..c as u8)).collect();
            let t = targets(h, w, truth.clone());
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&pred, &t).unwrap();

            let ious = cm.per_class_iou();
            let accs = cm.per_class_accuracy();
            for class in 0..c {
                let inter = truth
                    .iter()
                    .zip(&pred)
                    .filter(|(&a, &b)| a as usize == class && b as usize == class)
                    .count() as u64;
                let in_truth = truth.iter().filter(|&&v| v as usize == class).count() as u64;
                let in_pred = pred.iter().filter(|&&v| v as usize == class).count() as u64;
                let union = in_truth + in_pred - inter;
                match ious[class] {
                    Some(got) => assert_eq!(got, inter as f64 / union as f64),
                    None => assert_eq!(union, 0),
                }
                match accs[class] {
                    Some(got) => assert_eq!(got, inter as f64 / in_truth as f64),
                    None => assert_eq!(in_truth, 0),
                }
            }
        }
    }

    #[test]
    fn accumulation_is_order_independent_and_merges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..6)
            .map(|_| {
                (
                    (0..9).map(|_| rng.random_range(0..3u8)).collect(),
                    (0..9).map(|_| rng.random_range(0..3u8)).collect(),
                )
            })
            .collect();
        let run = |order: &[usize]| {
            let mut cm = ConfusionMatrix::new(3);
            for &i in order {
                let t = targets(3, 3, pairs[i].0.clone());
                cm.accumulate(&pairs[i].1, &t).unwrap();
            }
            cm
        };
        let forward = run(&[0, 1, 2, 3, 4, 5]);
        let shuffled = run(&[4, 2, 0, 5, 1, 3]);
        assert_eq!(forward, shuffled);

        // Two shards merged equal the single pass.
        let mut a = run(&[0, 1, 2]);
        let b = run(&[3, 4, 5]);
        a.merge(&b);
        assert_eq!(a, forward);
    }
}
