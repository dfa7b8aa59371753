//! Classification metrics and the evaluation report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fisher::Variant;

/// Metrics of one evaluation round. Precision, recall and F1 are macro
/// averages over the classes present in the truth or the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn compute_metrics(truth: &[u32], predicted: &[u32], n_classes: usize) -> Result<RoundMetrics> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!("{} true labels but {} predictions", truth.len(), predicted.len())));
    }
    if truth.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    let n = truth.iter().chain(predicted).map(|&l| l as usize + 1).max().unwrap_or(0).max(n_classes);
    let mut confusion = vec![vec![0usize; n]; n];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t as usize][p as usize] += 1;
    }
    let correct: usize = (0..n).map(|c| confusion[c][c]).sum();
    let (mut ps, mut rs, mut fs, mut present) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..n {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let claimed: usize = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && claimed == 0 {
            continue;
        }
        present += 1;
        let p = if claimed == 0 { 0.0 } else { tp / claimed as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        ps += p;
        rs += r;
        fs += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    let m = present as f64;
    Ok(RoundMetrics {
        accuracy: correct as f64 / truth.len() as f64,
        precision: ps / m,
        recall: rs / m,
        f1: fs / m,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over rounds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub class_names: Vec<String>,
    pub descriptor_len: usize,
    pub rounds: Vec<RoundMetrics>,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

impl EvalReport {
    pub fn new(variant: Variant, class_names: Vec<String>, descriptor_len: usize, rounds: Vec<RoundMetrics>) -> Self {
        let col = |f: fn(&RoundMetrics) -> f64| MeanStd::of(&rounds.iter().map(f).collect::<Vec<_>>());
        EvalReport {
            variant,
            class_names,
            descriptor_len,
            accuracy: col(|r| r.accuracy),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
            f1: col(|r| r.f1),
            rounds,
        }
    }

    /// Tab-separated table: one line per round, then the mean and standard
    /// deviation, then each round's confusion matrix.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# variant\t{}\tdescriptor_len\t{}", self.variant, self.descriptor_len);
        let _ = writeln!(s, "round\taccuracy\tprecision\trecall\tf1");
        for (i, r) in self.rounds.iter().enumerate() {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", i + 1, r.accuracy, r.precision, r.recall, r.f1);
        }
        let _ = writeln!(
            s,
            "mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.accuracy.mean, self.precision.mean, self.recall.mean, self.f1.mean
        );
        let _ = writeln!(
            s,
            "std\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.accuracy.std, self.precision.std, self.recall.std, self.f1.std
        );
        for (i, r) in self.rounds.iter().enumerate() {
            let _ = writeln!(s, "\n# confusion round {} (rows: truth, columns: predicted)", i + 1);
            let _ = writeln!(s, "\t{}", self.class_names.join("\t"));
            for (c, row) in r.confusion.iter().enumerate() {
                let name = self.class_names.get(c).map_or_else(|| c.to_string(), Clone::clone);
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{name}\t{}", cells.join("\t"));
            }
        }
        s
    }

    /// `accuracy 0.9250 ± 0.0112` style summary.
    pub fn summary(&self) -> String {
        format!(
            "{}: accuracy {:.4} ± {:.4}, precision {:.4} ± {:.4}, recall {:.4} ± {:.4}, F1 {:.4} ± {:.4} over {} rounds",
            self.variant,
            self.accuracy.mean,
            self.accuracy.std,
            self.precision.mean,
            self.precision.std,
            self.recall.mean,
            self.recall.std,
            self.f1.mean,
            self.f1.std,
            self.rounds.len()
        )
    }
}
