//! Evaluation metrics and the per-round metrics table.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Auc,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "auc" => Ok(Metric::Auc),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Predicted class of one logit row. A single logit predicts class 1 when
/// positive; wider rows take the argmax, ties going to the lower index.
pub fn predict(row: &[f64]) -> usize {
    if row.len() == 1 {
        return usize::from(row[0] > 0.0);
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::Metric("accuracy of an empty batch".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| predict(logits.row(r)) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Area under the ROC curve from ranks (Mann-Whitney U); tied scores share
/// their average rank, which counts each tied pair as one half.
pub fn auc_roc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let n1 = positives as f64;
    let u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    Ok(u / (n1 * negatives as f64))
}

/// Positive-class scores: the logit of a single-logit head, or the logit
/// difference of a two-class head.
pub fn binary_scores(logits: &Matrix) -> Result<Vec<f64>> {
    match logits.cols() {
        1 => Ok(logits.data().to_vec()),
        2 => Ok((0..logits.rows())
            .map(|r| logits.get(r, 1) - logits.get(r, 0))
            .collect()),
        c => Err(Error::Metric(format!(
            "AUC is defined for binary heads, not {c} classes"
        ))),
    }
}

pub fn evaluate_metric(metric: Metric, logits: &Matrix, labels: &[usize]) -> Result<f64> {
    match metric {
        Metric::Accuracy => accuracy(logits, labels),
        Metric::Auc => auc_roc(&binary_scores(logits)?, labels),
    }
}

pub const CSV_HEADER: &str = "round,train_loss,test_metric,elapsed_ms";

/// One line of the metrics table. `round` counts communication rounds, or
/// epochs for centralized training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub train_loss: f64,
    pub test_metric: f64,
    pub elapsed_ms: u64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{}",
            self.round, self.train_loss, self.test_metric, self.elapsed_ms
        )
    }
}

/// Incremental CSV output: the header on creation, then one flushed line
/// per row so that an aborted run leaves every finished round on disk.
pub struct CsvWriter<W: Write> {
    out: W,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(CsvWriter { out })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv_line())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn format_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn write_csv(rows: &[MetricsRow], path: &std::path::Path) -> Result<()> {
    std::fs::write(path, format_csv(rows)).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Format(format!("bad metrics header {other:?}"))),
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad metrics line `{line}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricsRow {
                round: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                test_metric: f[2].parse().map_err(|_| bad())?,
                elapsed_ms: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
