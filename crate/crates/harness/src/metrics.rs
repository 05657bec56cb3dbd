//! Confusion counts, IoU and region accuracy.

use serde::{Deserialize, Serialize};

use crate::data::BACKGROUND;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    /// Row = label, column = prediction.
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, predictions: &[usize], labels: &[usize]) {
        assert_eq!(predictions.len(), labels.len(), "prediction/label length mismatch");
        for (&p, &l) in predictions.iter().zip(labels) {
            self.counts[l * self.classes + p] += 1;
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn at(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both
    /// labels and predictions.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.at(class, class);
        let fn_: u64 = (0..self.classes).map(|p| self.at(class, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|l| self.at(l, class)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over classes that occur.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.classes).map(|c| self.at(c, c)).sum();
        correct as f64 / total.max(1) as f64
    }

    /// Accuracy over pixels whose label is not background.
    pub fn keyed_accuracy(&self) -> f64 {
        let mut total = 0;
        let mut correct = 0;
        for l in (0..self.classes).filter(|&l| l != BACKGROUND) {
            total += (0..self.classes).map(|p| self.at(l, p)).sum::<u64>();
            correct += self.at(l, l);
        }
        correct as f64 / total.max(1) as f64
    }
}
