//! Confusion matrix and per-class / macro classification metrics.
//!
//! Per class `c` (one-vs-rest): `TP = cm[c][c]`, `FP` is the rest of column
//! `c`, `FN` the rest of row `c`.
//!
//! * precision = TP / (TP + FP)
//! * recall    = TP / (TP + FN)
//! * F1        = 2TP / (2TP + FP + FN)
//! * accuracy  = trace / total
//!
//! Accuracy is the share of correctly classified samples. Read as a binary
//! formula that is (TP + TN) / (TP + FP + TN + FN); a numerator of TP + FN
//! would measure the share of actual positives instead, so it is not used.
//!
//! Any 0/0 ratio evaluates to 0 and raises a degenerate flag.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

/// Probabilities are clamped to `[CLAMP, 1 − CLAMP]` before taking logs.
pub const LOG_LOSS_CLAMP: f64 = 1e-15;

/// Counts indexed `[actual][predicted]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

/// A metric value plus whether it came from a 0/0 ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Ratio {
    if den == 0 {
        Ratio { value: 0.0, degenerate: true }
    } else {
        Ratio { value: num as f64 / den as f64, degenerate: false }
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &a) in predictions.iter().zip(labels) {
        if p >= NUM_CLASSES || a >= NUM_CLASSES {
            return Err(Error::Contract(format!("class index out of range: predicted {p}, actual {a}")));
        }
        cm.counts[a][p] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..NUM_CLASSES).map(|a| self.counts[a][c]).sum::<u64>() - self.counts[c][c]
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() - self.counts[c][c]
    }

    /// Number of examples whose actual class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn precision_class(&self, c: usize) -> Ratio {
        let tp = self.true_positives(c);
        ratio(tp, tp + self.false_positives(c))
    }

    pub fn recall_class(&self, c: usize) -> Ratio {
        let tp = self.true_positives(c);
        ratio(tp, tp + self.false_negatives(c))
    }

    pub fn f1_class(&self, c: usize) -> Ratio {
        let tp = self.true_positives(c);
        ratio(2 * tp, 2 * tp + self.false_positives(c) + self.false_negatives(c))
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Contract("accuracy of an empty confusion matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Header row plus one row per actual class.
    pub fn to_csv(&self) -> String {
        let mut s = format!("actual,{}\n", Label::NAMES.join(","));
        for (name, row) in Label::NAMES.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != format!("actual,{}", Label::NAMES.join(",")) {
            return Err(Error::Parse { line: 1, message: format!("unexpected header {header:?}") });
        }
        let mut cm = Self::default();
        for (c, name) in Label::NAMES.iter().enumerate() {
            let line = lines.next().ok_or(Error::Parse { line: c + 2, message: "missing row".into() })?;
            let mut fields = line.split(',');
            if fields.next() != Some(name) {
                return Err(Error::Parse { line: c + 2, message: format!("expected row {name}") });
            }
            for p in 0..NUM_CLASSES {
                cm.counts[c][p] = fields
                    .next()
                    .and_then(|f| f.trim().parse().ok())
                    .ok_or(Error::Parse { line: c + 2, message: "bad count".into() })?;
            }
        }
        Ok(cm)
    }
}

pub fn macro_average(per_class: &[f64]) -> f64 {
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// Mean of `−ln p_label`, with probabilities clamped away from 0 and 1.
pub fn log_loss<P: AsRef<[f64]>>(probabilities: &[P], labels: &[usize]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} probability vectors for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("log loss of no examples".into()));
    }
    let mut total = 0.0;
    for (i, (p, &y)) in probabilities.iter().zip(labels).enumerate() {
        let p = p.as_ref();
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!("probability vector {i} is not normalised (sum {sum})")));
        }
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Contract(format!("label {y} out of range for vector {i}")))?;
        total -= py.clamp(LOG_LOSS_CLAMP, 1.0 - LOG_LOSS_CLAMP).ln();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub per_class: [f64; NUM_CLASSES],
    #[serde(rename = "macro")]
    pub macro_avg: f64,
}

impl Averaged {
    fn from_ratios(r: [Ratio; NUM_CLASSES]) -> Self {
        let per_class = r.map(|x| x.value);
        Self { per_class, macro_avg: macro_average(&per_class) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: Averaged,
    pub recall: Averaged,
    pub f1: Averaged,
    pub accuracy: f64,
    pub log_loss: f64,
    /// Entries like `precision.neutral` for every metric that hit 0/0.
    pub degenerate_flags: Vec<String>,
}

impl MetricsReport {
    pub fn new<P: AsRef<[f64]>>(cm: &ConfusionMatrix, probabilities: &[P], labels: &[usize]) -> Result<Self> {
        let precision = std::array::from_fn(|c| cm.precision_class(c));
        let recall = std::array::from_fn(|c| cm.recall_class(c));
        let f1 = std::array::from_fn(|c| cm.f1_class(c));
        let mut degenerate_flags = Vec::new();
        for (metric, values) in [("precision", &precision), ("recall", &recall), ("f1", &f1)] {
            for (c, r) in values.iter().enumerate() {
                if r.degenerate {
                    degenerate_flags.push(format!("{metric}.{}", Label::NAMES[c]));
                }
            }
        }
        Ok(Self {
            precision: Averaged::from_ratios(precision),
            recall: Averaged::from_ratios(recall),
            f1: Averaged::from_ratios(f1),
            accuracy: cm.accuracy()?,
            log_loss: log_loss(probabilities, labels)?,
            degenerate_flags,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
        for (c, name) in Label::NAMES.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<10} {:>9.4} {:>9.4} {:>9.4}",
                name, self.precision.per_class[c], self.recall.per_class[c], self.f1.per_class[c]
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>9.4} {:>9.4} {:>9.4}",
            "macro", self.precision.macro_avg, self.recall.macro_avg, self.f1.macro_avg
        );
        let _ = writeln!(s, "accuracy   {:.4}", self.accuracy);
        let _ = writeln!(s, "log loss   {:.4}", self.log_loss);
        if !self.degenerate_flags.is_empty() {
            let _ = writeln!(s, "degenerate (0/0 -> 0): {}", self.degenerate_flags.join(", "));
        }
        s
    }
}
