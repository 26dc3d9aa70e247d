//! Classification metrics and learning-curve output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpochRecord;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1; any zero denominator yields 0.
pub fn prf1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the chance that a
/// random positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of positives, tied runs sharing their mean rank.
    // Doubled to stay in integers.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let pos_in_run = idx[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        rank_sum2 += pos_in_run * (i + 1 + j + 1) as u128;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the evaluated pairs hold a single class.
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
    pub threshold: f64,
    /// Metrics that fell back to 0 or were undefined.
    pub flags: Vec<String>,
}

impl EvalReport {
    /// Scores at or above `threshold` count as positive predictions.
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let pred: Vec<u8> = scores.iter().map(|&s| (s >= threshold) as u8).collect();
        let counts = confusion(&pred, labels)?;
        let (precision, recall, f1) = prf1(&counts);
        let mut flags = Vec::new();
        if counts.tp + counts.fp == 0 {
            flags.push("precision_zero_denominator".to_string());
        }
        if counts.tp + counts.fn_ == 0 {
            flags.push("recall_zero_denominator".to_string());
        }
        if counts.total() == 0 {
            flags.push("no_pairs".to_string());
        }
        let auc = match roc_auc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => {
                flags.push("auc_undefined".to_string());
                None
            }
            Err(e) => return Err(e),
        };
        Ok(EvalReport {
            accuracy: accuracy(&counts),
            precision,
            recall,
            f1,
            auc,
            counts,
            threshold,
            flags,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub const CURVE_HEADER: [&str; 4] = ["epoch", "train_loss", "val_loss", "val_auc"];

/// Learning curves as CSV, one row per epoch. An undefined AUC is left empty.
pub fn emit_curves(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVE_HEADER)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_auc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_curves(text: &str) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(CURVE_HEADER) {
        return Err(Error::Format(format!("curve header must be {}", CURVE_HEADER.join(","))));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("`{s}`: {e}")));
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(EpochRecord {
                epoch: rec[0].parse().map_err(|e| Error::Format(format!("epoch `{}`: {e}", &rec[0])))?,
                train_loss: num(&rec[1])?,
                val_loss: num(&rec[2])?,
                val_auc: if rec[3].is_empty() { None } else { Some(num(&rec[3])?) },
            })
        })
        .collect()
}

pub fn write_curves(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, emit_curves(history)?).map_err(|e| Error::io(path, e))
}
