use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// `counts[gt * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return shape_err(format!("{} predictions for {} labels", pred.len(), gt.len()));
        }
        let n = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize >= n || g as usize >= n {
                return Err(Error::Validation(format!("label pair ({p}, {g}) outside {n} classes")));
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let n = self.classes;
        (0..n)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_present(&self.per_class_iou())
    }
}

fn mean_present(ious: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// Per-class IoU and their mean over classes that occur.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU of one prediction map against its ground truth.
pub fn miou(pred: &[u32], gt: &[u32], classes: usize) -> Result<IouSummary> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.summary())
}

impl ConfusionMatrix {
    pub fn summary(&self) -> IouSummary {
        let per_class_iou = self.per_class_iou();
        IouSummary {
            miou: mean_present(&per_class_iou),
            per_class_iou,
        }
    }
}

/// Result of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub config: serde_json::Value,
    pub seed: u64,
    pub wall_clock_secs: f64,
}
