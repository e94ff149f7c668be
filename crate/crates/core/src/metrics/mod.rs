//! Two-class confusion matrix, accuracy / precision / recall / F1, and the
//! per-experiment report table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CLASS_NAMES;

/// `counts[actual][predicted]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(actual: &[usize], predicted: &[usize]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::contract(format!(
                "confusion matrix: {} labels vs {} predictions",
                actual.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new();
        for (&a, &p) in actual.iter().zip(predicted) {
            cm.update(a, p)?;
        }
        Ok(cm)
    }

    pub fn update(&mut self, actual: usize, predicted: usize) -> Result<()> {
        if actual > 1 || predicted > 1 {
            return Err(Error::contract(format!(
                "confusion matrix: class pair ({actual}, {predicted}) out of range"
            )));
        }
        self.counts[actual][predicted] += 1;
        Ok(())
    }

    /// Entrywise sum, for combining evaluation shards.
    pub fn merge(&self, other: &Self) -> Self {
        let mut out = *self;
        for a in 0..2 {
            for p in 0..2 {
                out.counts[a][p] += other.counts[a][p];
            }
        }
        out
    }

    /// Swaps the roles of actual and predicted.
    pub fn transpose(&self) -> Self {
        let c = self.counts;
        Self {
            counts: [[c[0][0], c[1][0]], [c[0][1], c[1][1]]],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(tp, tn, fp, fn)` with `reference` as the positive class.
    pub fn outcomes(&self, reference: usize) -> (u64, u64, u64, u64) {
        let other = 1 - reference;
        let c = self.counts;
        (
            c[reference][reference],
            c[other][other],
            c[other][reference],
            c[reference][other],
        )
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (self.counts[0][0] + self.counts[1][1]) as f64 / total as f64
    }

    pub fn summarize(&self, reference: usize) -> Result<ClassSummary> {
        if reference > 1 {
            return Err(Error::contract(format!("summarize: class {reference} out of range")));
        }
        if self.total() == 0 {
            return Err(Error::contract("summarize: empty confusion matrix"));
        }
        let (tp, tn, fp, fn_) = self.outcomes(reference);
        let mut warnings = Vec::new();
        let mut ratio = |num: u64, den: u64, what: &'static str| {
            if den == 0 {
                warnings.push(what);
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio(tp + tn, tp + tn + fp + fn_, "accuracy");
        let precision = ratio(tp, tp + fp, "precision");
        let recall = ratio(tp, tp + fn_, "recall");
        let f1 = if precision + recall == 0.0 {
            warnings.push("f1");
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(ClassSummary {
            precision,
            recall,
            f1,
            accuracy,
            warnings,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Metrics whose denominator was zero (reported as 0).
    pub warnings: Vec<&'static str>,
}

/// One row of the experiment report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    /// `[happy, sad]`, each `[precision, recall, f1]`.
    pub per_class: [[f64; 3]; 2],
    pub accuracy: f64,
}

impl ExperimentResult {
    pub fn from_confusion(name: impl Into<String>, cm: &ConfusionMatrix) -> Result<Self> {
        let happy = cm.summarize(0)?;
        let sad = cm.summarize(1)?;
        Ok(Self {
            name: name.into(),
            per_class: [
                [happy.precision, happy.recall, happy.f1],
                [sad.precision, sad.recall, sad.f1],
            ],
            accuracy: happy.accuracy,
        })
    }

    fn values(&self) -> [f64; 7] {
        let [h, s] = self.per_class;
        [h[0], h[1], h[2], s[0], s[1], s[2], self.accuracy]
    }
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "experiment",
    "happy_precision",
    "happy_recall",
    "happy_f1",
    "sad_precision",
    "sad_recall",
    "sad_f1",
    "accuracy",
];

/// Aligned text table, values to 2 decimals.
pub fn report_table(results: &[ExperimentResult]) -> String {
    let name_width = results
        .iter()
        .map(|r| r.name.chars().count())
        .chain(["Experiment".len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_width$}  {:^20}  {:^20}  {:>8}",
        "",
        CLASS_NAMES[0].to_uppercase(),
        CLASS_NAMES[1].to_uppercase(),
        ""
    );
    let _ = writeln!(
        out,
        "{:<name_width$}  {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}  {:>8}",
        "Experiment", "P", "R", "F1", "P", "R", "F1", "Accuracy"
    );
    for r in results {
        let v = r.values();
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>6.2} {:>6.2} {:>6.2}  {:>6.2} {:>6.2} {:>6.2}  {:>8.2}",
            r.name, v[0], v[1], v[2], v[3], v[4], v[5], v[6]
        );
    }
    out
}

/// CSV with the [`REPORT_COLUMNS`] header, values to 2 decimals.
pub fn report_csv(results: &[ExperimentResult]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(REPORT_COLUMNS)?;
    for r in results {
        let mut record = vec![r.name.clone()];
        record.extend(r.values().iter().map(|v| format!("{v:.2}")));
        writer.write_record(&record)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Format(format!("csv: {}", e.error())))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Inverse of [`report_csv`] (up to the 2-decimal rounding).
pub fn parse_report_csv(text: &str) -> Result<Vec<ExperimentResult>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Format(format!("report csv: unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut v = [0.0; 7];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = record[k + 1]
                .parse()
                .map_err(|_| Error::Format(format!("report csv: bad number {:?}", &record[k + 1])))?;
        }
        out.push(ExperimentResult {
            name: record[0].to_string(),
            per_class: [[v[0], v[1], v[2]], [v[3], v[4], v[5]]],
            accuracy: v[6],
        });
    }
    Ok(out)
}
