//! Imbalance-aware classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_recall: Vec<f64>,
    pub macro_recall: f64,
    pub macro_auc: f64,
    pub g_mean: f64,
    /// `confusion[i][j]`: samples of class `i` predicted as `j`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn num_classes(&self) -> usize {
        self.per_class_recall.len()
    }

    /// Recall of the smallest class by support.
    pub fn minority_recall(&self) -> f64 {
        let support: Vec<usize> = self.confusion.iter().map(|r| r.iter().sum()).collect();
        let minority = (0..support.len()).min_by_key(|&c| (support[c], c)).unwrap_or(0);
        self.per_class_recall[minority]
    }
}

/// Metrics for labels `y_true`, hard predictions `y_pred` and per-class
/// scores `y_score` (one row per sample).
///
/// AUC for class `c` is the probability that a random class-`c` sample
/// scores higher in column `c` than a random other sample, ties counting
/// half; the macro value averages classes with equal weight.
pub fn compute_metrics(y_true: &[usize], y_pred: &[usize], y_score: &Matrix) -> Result<MetricsReport> {
    let n = y_true.len();
    let k = y_score.cols();
    if y_pred.len() != n || y_score.rows() != n {
        return Err(Error::shape(
            "compute_metrics",
            format!("{n} labels, {} predictions, {} score rows", y_pred.len(), y_score.rows()),
        ));
    }
    if k < 2 {
        return Err(Error::Validation("metrics need at least two classes".into()));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&c| c >= k) {
        return Err(Error::Validation(format!("class {bad} out of range for {k} score columns")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    if let Some(class) = support.iter().position(|&s| s == 0) {
        return Err(Error::MissingClass { class });
    }
    let per_class_recall: Vec<f64> = (0..k).map(|c| confusion[c][c] as f64 / support[c] as f64).collect();
    let macro_recall = per_class_recall.iter().sum::<f64>() / k as f64;
    let g_mean = per_class_recall.iter().product::<f64>().powf(1.0 / k as f64);

    let mut auc_sum = 0.0;
    for c in 0..k {
        let scores: Vec<f64> = (0..n).map(|i| y_score[(i, c)]).collect();
        let positive: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        auc_sum += rank_auc(&scores, &positive);
    }
    Ok(MetricsReport {
        per_class_recall,
        macro_recall,
        macro_auc: auc_sum / k as f64,
        g_mean,
        confusion,
    })
}

/// Mann-Whitney AUC with midranks for ties. Both groups must be non-empty.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&s| positive[s]).count() as f64;
        i = j + 1;
    }
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = positive.len() as f64 - pos;
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}
