use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for c in 0..self.classes {
            let row: Vec<String> = self.row(c).iter().map(u64::to_string).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub top1_error_percent: f64,
    pub confusion: ConfusionMatrix,
    /// Classes never predicted; their precision is reported as 0.
    pub undefined_precision: Vec<bool>,
    /// Classes absent from the labels; their recall is reported as 0.
    pub undefined_recall: Vec<bool>,
    /// Mean cross-entropy, when computed from logits.
    pub loss: Option<f64>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricsReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Value(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Value("cannot evaluate zero samples".into()));
        }
        if let Some(&bad) = truth.iter().chain(predicted).find(|&&c| c >= classes) {
            return Err(Error::Value(format!("class id {bad} out of range for {classes} classes")));
        }
        let mut confusion = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion.record(t, p);
        }

        let mut precision = Vec::with_capacity(classes);
        let mut recall = Vec::with_capacity(classes);
        let mut f1 = Vec::with_capacity(classes);
        let mut undefined_precision = Vec::with_capacity(classes);
        let mut undefined_recall = Vec::with_capacity(classes);
        for c in 0..classes {
            let tp = confusion.get(c, c);
            let predicted_c: u64 = (0..classes).map(|t| confusion.get(t, c)).sum();
            let actual_c: u64 = confusion.row(c).iter().sum();
            let (p, p_undef) = ratio(tp, predicted_c);
            let (r, r_undef) = ratio(tp, actual_c);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
            undefined_precision.push(p_undef);
            undefined_recall.push(r_undef);
        }

        let accuracy = confusion.trace() as f64 / confusion.total() as f64;
        Ok(MetricsReport {
            accuracy,
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            precision,
            recall,
            f1,
            top1_error_percent: 100.0 - 100.0 * accuracy,
            confusion,
            undefined_precision,
            undefined_recall,
            loss: None,
        })
    }

    /// `class,precision,recall,f1` rows, then `accuracy` and `top1_error`.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("class,precision,recall,f1\n");
        for (c, name) in class_names.iter().enumerate() {
            let _ = writeln!(s, "{name},{},{},{}", self.precision[c], self.recall[c], self.f1[c]);
        }
        let _ = writeln!(s, "accuracy,{}", self.accuracy);
        let _ = writeln!(s, "top1_error,{}", self.top1_error_percent);
        s
    }

    pub fn to_text(&self, class_names: &[String]) -> String {
        let width = class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  precision  recall     f1", "class");
        for (c, name) in class_names.iter().enumerate() {
            let flag = match (self.undefined_precision[c], self.undefined_recall[c]) {
                (true, true) => "  (no predictions, no samples)",
                (true, false) => "  (never predicted)",
                (false, true) => "  (no samples)",
                _ => "",
            };
            let _ = writeln!(
                s,
                "{name:<width$}  {:>9.4}  {:>6.4}  {:>6.4}{flag}",
                self.precision[c], self.recall[c], self.f1[c]
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>6.4}  {:>6.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(s, "accuracy      {:.4}", self.accuracy);
        let _ = writeln!(s, "top-1 error   {:.2}%", self.top1_error_percent);
        if let Some(loss) = self.loss {
            let _ = writeln!(s, "loss          {loss:.6}");
        }
        s
    }
}
