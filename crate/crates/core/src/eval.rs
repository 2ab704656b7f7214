//! Ranking metrics for interpretation and classification, reported in percent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cloud::Sample;
use crate::error::{data_err, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half, in percent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return data_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return data_err("scores contain NaN");
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return data_err("ROC AUC needs both classes");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks: each tie group shares the average of its 1-based ranks
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok(100.0 * (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Share of positives among the `m` highest scores (ties broken by the
/// smaller index), in percent.
pub fn precision_at_m(scores: &[f64], labels: &[u8], m: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return data_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if m == 0 || m > scores.len() {
        return data_err(format!("precision@{m} undefined for {} points", scores.len()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits = idx[..m].iter().filter(|&&i| labels[i] == 1).count();
    Ok(100.0 * hits as f64 / m as f64)
}

/// Interpretation metrics of one method on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationMetrics {
    pub auc: f64,
    pub precision_at: BTreeMap<usize, f64>,
    pub n_samples: usize,
    /// Points of all samples ranked jointly instead of per sample.
    pub pooled: bool,
}

/// Metrics over positive samples. `scores[i]` belongs to `samples[i]`;
/// negatives are skipped. Per-sample values are macro-averaged unless
/// `pooled`.
pub fn interpretation_metrics(scores: &[Vec<f64>], samples: &[&Sample], m_list: &[usize], pooled: bool) -> Result<InterpretationMetrics> {
    if scores.len() != samples.len() {
        return data_err(format!("{} score vectors for {} samples", scores.len(), samples.len()));
    }
    let pos: Vec<(Vec<u8>, &Vec<f64>)> =
        samples.iter().zip(scores).filter(|(s, _)| s.y == 1).map(|(s, sc)| (s.interp_or_zeros(), sc)).collect();
    if pos.is_empty() {
        return data_err("no positive samples to evaluate interpretation on");
    }
    if pooled {
        let labels: Vec<u8> = pos.iter().flat_map(|(l, _)| l.iter().copied()).collect();
        let all: Vec<f64> = pos.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        let mut precision_at = BTreeMap::new();
        for &m in m_list {
            let mut v = Vec::new();
            for (l, s) in &pos {
                v.push(precision_at_m(s, l, m)?);
            }
            precision_at.insert(m, v.iter().sum::<f64>() / v.len() as f64);
        }
        return Ok(InterpretationMetrics { auc: roc_auc(&all, &labels)?, precision_at, n_samples: pos.len(), pooled });
    }
    let mut auc = 0.0;
    let mut prec: BTreeMap<usize, f64> = m_list.iter().map(|&m| (m, 0.0)).collect();
    for (labels, s) in &pos {
        auc += roc_auc(s, labels)?;
        for &m in m_list {
            *prec.get_mut(&m).expect("inserted") += precision_at_m(s, labels, m)?;
        }
    }
    let k = pos.len() as f64;
    prec.values_mut().for_each(|v| *v /= k);
    Ok(InterpretationMetrics { auc: auc / k, precision_at: prec, n_samples: pos.len(), pooled })
}

/// Mean and sample standard deviation of per-seed values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / n };
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, values }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Seed-aggregated metrics of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub interpretation_auc: Option<Stat>,
    pub precision_at: BTreeMap<usize, Stat>,
    pub classification_auc: Option<Stat>,
}

impl MetricReport {
    pub fn from_runs(method: &str, interp: &[InterpretationMetrics], clf_auc: &[f64]) -> Self {
        let mut precision_at = BTreeMap::new();
        if let Some(first) = interp.first() {
            for &m in first.precision_at.keys() {
                precision_at.insert(m, Stat::new(interp.iter().map(|r| r.precision_at[&m]).collect()));
            }
        }
        MetricReport {
            method: method.into(),
            interpretation_auc: (!interp.is_empty()).then(|| Stat::new(interp.iter().map(|r| r.auc).collect())),
            precision_at,
            classification_auc: (!clf_auc.is_empty()).then(|| Stat::new(clf_auc.to_vec())),
        }
    }

    pub fn csv_header(m_list: &[usize]) -> String {
        let mut h = String::from("method,interp_auc_mean,interp_auc_std");
        for m in m_list {
            h.push_str(&format!(",prec@{m}_mean,prec@{m}_std"));
        }
        h.push_str(",clf_auc_mean,clf_auc_std");
        h
    }

    pub fn csv_row(&self, m_list: &[usize]) -> String {
        let cell = |s: Option<&Stat>| s.map_or(",".to_string(), |s| format!("{:.4},{:.4}", s.mean, s.std));
        let mut row = format!("{},{}", self.method, cell(self.interpretation_auc.as_ref()));
        for m in m_list {
            row.push(',');
            row.push_str(&cell(self.precision_at.get(m)));
        }
        row.push(',');
        row.push_str(&cell(self.classification_auc.as_ref()));
        row
    }
}

/// CSV table of several reports.
pub fn metric_table(reports: &[MetricReport], m_list: &[usize]) -> String {
    let mut out = MetricReport::csv_header(m_list);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row(m_list));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap(), 50.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 100.0);
        assert_eq!(roc_auc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 50.0);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_m(&[0.9, 0.8, 0.1], &[1, 0, 1], 2).unwrap(), 50.0);
        assert_eq!(precision_at_m(&[0.2, 0.5, 0.1], &[1, 1, 1], 1).unwrap(), 100.0);
        assert!(precision_at_m(&[0.2], &[1], 2).is_err());
        // ties resolved toward the smaller index
        assert_eq!(precision_at_m(&[0.5, 0.5, 0.5], &[0, 1, 1], 1).unwrap(), 0.0);
    }

    #[test]
    fn stat_mean_std() {
        let s = Stat::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::new(vec![4.0]).std, 0.0);
    }
}
