//! Confusion-matrix segmentation metrics and their JSON-lines records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][prediction]`, plus the number of ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one raster pair. Pixels whose truth equals `ignore` are counted
    /// separately; any other out-of-range label is an error and leaves the
    /// matrix unchanged.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let l = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= l || p as usize >= l {
                return Err(Error::Data(format!("label {} outside 0..{l}", t.max(p))));
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == ignore {
                self.ignored += 1;
            } else {
                self.counts[t as usize * l + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Data("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; `None` for classes absent from both truth and
    /// prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let l = self.num_classes;
        (0..l)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..l).map(|k| self.get(c, k)).sum();
                let col: u64 = (0..l).map(|k| self.get(k, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union (0 when there are none).
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> Accuracy {
        let total = self.total();
        if total == 0 {
            return Accuracy { value: 0.0, empty: true };
        }
        let trace: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        Accuracy {
            value: trace as f64 / total as f64,
            empty: false,
        }
    }
}

/// Pixel accuracy; `empty` flags a matrix without counted pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub value: f64,
    pub empty: bool,
}

/// One JSON-lines metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub subset: String,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricRecord {
    pub fn from_matrix(subset: &str, cm: &ConfusionMatrix, seed: u64, config_hash: &str) -> Self {
        Self {
            subset: subset.to_string(),
            miou: cm.miou(),
            accuracy: cm.pixel_accuracy().value,
            per_class_iou: cm.class_iou(),
            seed,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_counts(counts: &[u64], l: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes: l,
            counts: counts.to_vec(),
            ignored: 0,
        }
    }

    #[test]
    fn perfect_class_two() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[2; 100], &[2; 100], Some(255)).unwrap();
        assert_eq!(cm.get(2, 2), 100);
        assert_eq!(cm.miou(), 1.0);
        assert_eq!(cm.pixel_accuracy().value, 1.0);
    }

    #[test]
    fn all_ignored_only_counts_ignores() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[1; 10], &[255; 10], Some(255)).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored, 10);
        let acc = cm.pixel_accuracy();
        assert!(acc.empty && acc.value == 0.0);
    }

    #[test]
    fn two_by_two_closed_form() {
        let cm = from_counts(&[2, 1, 1, 2], 2);
        assert_eq!(cm.class_iou(), vec![Some(0.5), Some(0.5)]);
        assert_eq!(cm.miou(), 0.5);
        assert_eq!(cm.pixel_accuracy().value, 4.0 / 6.0);
    }

    #[test]
    fn disjoint_prediction_is_zero() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[1, 1, 0, 0], &[0, 0, 1, 1], None).unwrap();
        assert_eq!(cm.miou(), 0.0);
    }

    #[test]
    fn empty_union_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[0, 1], &[0, 1], None).unwrap();
        assert_eq!(cm.class_iou(), vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(cm.miou(), 1.0);
    }

    #[test]
    fn out_of_range_label_is_rejected_without_side_effects() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.accumulate(&[0, 1], &[0, 3], Some(255)).is_err());
        assert!(cm.accumulate(&[0, 7], &[0, 1], Some(255)).is_err());
        assert_eq!(cm, ConfusionMatrix::new(3));
    }

    #[test]
    fn record_uses_expected_keys() {
        let cm = from_counts(&[2, 1, 1, 2], 2);
        let line = MetricRecord::from_matrix("intensity+material", &cm, 7, "abc").to_json_line().unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in ["subset", "mIoU", "accuracy", "per_class_iou", "seed", "config_hash"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
