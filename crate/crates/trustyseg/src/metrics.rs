//! Confusion-matrix evaluation: pixel accuracy, class-wise IoU, seen/unseen
//! mean IoU and their harmonic mean.

use std::fmt;

use crate::embeddings::{ClassVocabulary, LabelMap};
use crate::error::{Error, Result};

/// Pixel counts indexed by (ground truth, prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            class_count,
            counts: vec![0; class_count * class_count],
            ignored: 0,
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.class_count + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair of equal-shaped label maps.
    /// Ground-truth pixels equal to the masked sentinel are ignored.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                left: vec![pred.height, pred.width],
                right: vec![gt.height, gt.width],
            });
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == self.class_count {
                self.ignored += 1;
                continue;
            }
            if g > self.class_count {
                return Err(Error::UnknownLabel {
                    label: g,
                    classes: self.class_count,
                });
            }
            if p >= self.class_count {
                return Err(Error::UnknownLabel {
                    label: p,
                    classes: self.class_count,
                });
            }
            self.counts[g * self.class_count + p] += 1;
        }
        Ok(())
    }

    /// Adds another matrix; accumulation distributes over batching.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_count != other.class_count {
            return Err(Error::ShapeMismatch {
                op: "merge",
                left: vec![self.class_count],
                right: vec![other.class_count],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Evaluation summary; every value is a fraction in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pixel_acc: f64,
    /// Per-class IoU; `None` when the class occurs in neither prediction
    /// nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_seen: f64,
    pub miou_unseen: f64,
    pub hiou: f64,
}

/// Harmonic mean of the two mean-IoU values; zero when both vanish.
pub fn harmonic_mean_iou(seen: f64, unseen: f64) -> f64 {
    if seen + unseen > 0.0 {
        2.0 * seen * unseen / (seen + unseen)
    } else {
        0.0
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Summarizes a confusion matrix over the vocabulary's seen/unseen split.
///
/// Classes whose union is empty are left out of the means, the usual
/// convention for datasets where not every class occurs.
pub fn report(cm: &ConfusionMatrix, vocab: &ClassVocabulary) -> Result<EvalReport> {
    if cm.class_count() != vocab.class_count() {
        return Err(Error::ShapeMismatch {
            op: "report",
            left: vec![cm.class_count()],
            right: vec![vocab.class_count()],
        });
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyConfusion);
    }
    let c = cm.class_count();
    let mut correct = 0u64;
    let mut per_class = Vec::with_capacity(c);
    for class in 0..c {
        let diag = cm.count(class, class);
        correct += diag;
        let row: u64 = (0..c).map(|p| cm.count(class, p)).sum();
        let col: u64 = (0..c).map(|g| cm.count(g, class)).sum();
        let union = row + col - diag;
        per_class.push(if union == 0 {
            None
        } else {
            Some(diag as f64 / union as f64)
        });
    }
    let collect = |ids: &[usize]| -> Vec<f64> {
        ids.iter().filter_map(|&c| per_class[c]).collect()
    };
    let miou_seen = mean(&collect(&vocab.seen_ids()));
    let miou_unseen = mean(&collect(&vocab.unseen_ids()));
    Ok(EvalReport {
        pixel_acc: correct as f64 / total as f64,
        per_class_iou: per_class,
        miou_seen,
        miou_unseen,
        hiou: harmonic_mean_iou(miou_seen, miou_unseen),
    })
}

impl EvalReport {
    /// Machine-readable `key = value` lines, values in percent.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("pacc = {:.4}\n", self.pixel_acc * 100.0));
        out.push_str(&format!("miou_seen = {:.4}\n", self.miou_seen * 100.0));
        out.push_str(&format!("miou_unseen = {:.4}\n", self.miou_unseen * 100.0));
        out.push_str(&format!("hiou = {:.4}\n", self.hiou * 100.0));
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("iou_class_{c} = {:.4}\n", v * 100.0)),
                None => out.push_str(&format!("iou_class_{c} = n/a\n")),
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "  pAcc     mIoU(S)  mIoU(U)  hIoU")?;
        write!(
            f,
            "  {:<8.2} {:<8.2} {:<8.2} {:<8.2}",
            self.pixel_acc * 100.0,
            self.miou_seen * 100.0,
            self.miou_unseen * 100.0,
            self.hiou * 100.0
        )
    }
}
