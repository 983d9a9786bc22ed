//! AUC and LogLoss, per domain and pooled.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::CLIP;

/// Rank-based ROC AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUC over NaN scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg * pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with the training clip bound.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("logloss", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("LogLoss over zero instances".into()));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(CLIP, 1.0 - CLIP);
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Metrics over one group of instances; `None` where undefined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
}

impl GroupMetrics {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(Self {
            n: scores.len(),
            auc: optional(auc(scores, labels))?,
            logloss: optional(logloss(scores, labels))?,
        })
    }
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TotalMode {
    /// Metrics over the pooled predictions of all domains.
    #[default]
    Pooled,
    /// Unweighted mean of the defined per-domain metrics.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Indexed by `domain - 1`.
    pub domains: Vec<GroupMetrics>,
    pub total: GroupMetrics,
}

impl EvalReport {
    pub fn total_auc(&self) -> Option<f64> {
        self.total.auc
    }
}

/// Per-domain and total metrics for `scores` aligned with `dataset`.
pub fn evaluate_scores(dataset: &Dataset, scores: &[f64], mode: TotalMode) -> Result<EvalReport> {
    if scores.len() != dataset.len() {
        return Err(Error::shape("evaluate", &[scores.len()], &[dataset.len()]));
    }
    let d = dataset.spec().num_domains as usize;
    let mut s = vec![Vec::new(); d];
    let mut l = vec![Vec::new(); d];
    for i in 0..dataset.len() {
        let k = dataset.domain(i) as usize - 1;
        s[k].push(scores[i]);
        l[k].push(dataset.label(i));
    }
    let domains = s
        .iter()
        .zip(&l)
        .map(|(s, l)| GroupMetrics::compute(s, l))
        .collect::<Result<Vec<_>>>()?;
    let total = match mode {
        TotalMode::Pooled => GroupMetrics::compute(scores, dataset.labels())?,
        TotalMode::Macro => {
            let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
            GroupMetrics {
                n: dataset.len(),
                auc: mean(domains.iter().filter_map(|m| m.auc).collect()),
                logloss: mean(domains.iter().filter_map(|m| m.logloss).collect()),
            }
        }
    };
    Ok(EvalReport { domains, total })
}
