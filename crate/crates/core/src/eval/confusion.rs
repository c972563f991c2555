//! Confusion matrices and F1 scores.

use crate::error::{Error, Result};

/// Square count matrix indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Metrics("confusion matrix needs at least one class".into()));
        }
        let k = classes.len();
        Ok(ConfusionMatrix {
            classes,
            counts: vec![0; k * k],
        })
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> usize {
        self.counts[true_class * self.k() + pred_class]
    }

    pub fn add(&mut self, true_class: usize, pred_class: usize) -> Result<()> {
        let k = self.k();
        if true_class >= k || pred_class >= k {
            return Err(Error::Metrics(format!(
                "label out of range: true {true_class}, predicted {pred_class}, classes {k}"
            )));
        }
        self.counts[true_class * k + pred_class] += 1;
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Support (true-label count) of a class.
    pub fn support(&self, class: usize) -> usize {
        let k = self.k();
        (0..k).map(|p| self.counts[class * k + p]).sum()
    }

    /// Times a class was predicted.
    pub fn predicted(&self, class: usize) -> usize {
        let k = self.k();
        (0..k).map(|t| self.counts[t * k + class]).sum()
    }

    /// Rows as nested vectors (for report serialization).
    pub fn rows(&self) -> Vec<Vec<usize>> {
        let k = self.k();
        (0..k)
            .map(|t| (0..k).map(|p| self.counts[t * k + p]).collect())
            .collect()
    }
}

/// Tallies `(true, predicted)` pairs into a matrix over `classes`.
pub fn confusion(
    true_labels: &[usize],
    pred_labels: &[usize],
    classes: &[String],
) -> Result<ConfusionMatrix> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::Metrics(format!(
            "label lists differ in length: {} vs {}",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes.to_vec())?;
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// Per-class, macro, and support-weighted F1.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Classes whose F1 denominator was zero (score set to 0 by convention).
    pub zero_division: Vec<usize>,
}

/// F1 per class is `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
/// Macro averages over every class; weighted weights by support (zero-support
/// classes drop out naturally).
pub fn f1_scores(cm: &ConfusionMatrix) -> F1Scores {
    let k = cm.k();
    let mut per_class = Vec::with_capacity(k);
    let mut zero_division = Vec::new();
    for c in 0..k {
        let tp = cm.count(c, c);
        let fp = cm.predicted(c) - tp;
        let fn_ = cm.support(c) - tp;
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            zero_division.push(c);
            per_class.push(0.0);
        } else {
            per_class.push(2.0 * tp as f64 / denom as f64);
        }
    }
    let macro_f1 = per_class.iter().sum::<f64>() / k as f64;
    let total_support: usize = (0..k).map(|c| cm.support(c)).sum();
    let weighted_f1 = if total_support == 0 {
        0.0
    } else {
        (0..k)
            .map(|c| per_class[c] * cm.support(c) as f64)
            .sum::<f64>()
            / total_support as f64
    };
    F1Scores {
        per_class,
        macro_f1,
        weighted_f1,
        zero_division,
    }
}
