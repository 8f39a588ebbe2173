//! Classification and ranking metrics.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NarsError, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(NarsError::Invalid("metric over an empty set of nodes".into()));
    }
    if a != b {
        return Err(NarsError::Dimension(format!("{a} predictions for {b} ground-truth entries")));
    }
    Ok(())
}

pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// F1 from true/false positives and false negatives pooled over all classes.
pub fn micro_f1<P: AsRef<[u32]>, Q: AsRef<[u32]>>(pred: &[P], truth: &[Q]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let p: BTreeSet<u32> = p.as_ref().iter().copied().collect();
        let t: BTreeSet<u32> = t.as_ref().iter().copied().collect();
        let both = p.intersection(&t).count();
        tp += both;
        fp += p.len() - both;
        fneg += t.len() - both;
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Class ids by descending score; equal scores keep ascending class id.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| match scores[j].total_cmp(&scores[i]) {
        Ordering::Equal => i.cmp(&j),
        o => o,
    });
    order
}

/// NDCG with binary gains and `1/log2(rank+1)` discounts, over the whole
/// ranking or its top `k`. `None` when nothing is relevant.
pub fn ndcg(scores: &[f64], relevant: &[u32], k: Option<usize>) -> Option<f64> {
    let rel: BTreeSet<usize> = relevant.iter().map(|&c| c as usize).collect();
    if rel.is_empty() {
        return None;
    }
    let cut = k.unwrap_or(scores.len()).min(scores.len());
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranking(scores)
        .into_iter()
        .take(cut)
        .enumerate()
        .filter(|(_, c)| rel.contains(c))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=rel.len().min(cut)).map(discount).sum();
    Some(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

/// Reciprocal rank of the best-ranked relevant class.
pub fn mrr(scores: &[f64], relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let rank = ranking(scores).iter().position(|&c| relevant.contains(&(c as u32)))?;
    Some(1.0 / (rank + 1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RankingSummary {
    pub ndcg: f64,
    pub mrr: f64,
    pub evaluated: usize,
    /// Nodes without any relevant label, left out of both means.
    pub skipped: usize,
}

pub fn ranking_metrics<S: AsRef<[f64]>, R: AsRef<[u32]>>(scores: &[S], relevant: &[R], k: Option<usize>) -> Result<RankingSummary> {
    check_lengths(scores.len(), relevant.len())?;
    let mut out = RankingSummary::default();
    for (s, r) in scores.iter().zip(relevant) {
        match (ndcg(s.as_ref(), r.as_ref(), k), mrr(s.as_ref(), r.as_ref())) {
            (Some(n), Some(m)) => {
                out.ndcg += n;
                out.mrr += m;
                out.evaluated += 1;
            }
            _ => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        log::warn!("{} nodes have no relevant label and were skipped", out.skipped);
    }
    if out.evaluated == 0 {
        return Err(NarsError::Invalid("no node has a relevant label".into()));
    }
    out.ndcg /= out.evaluated as f64;
    out.mrr /= out.evaluated as f64;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRow { epoch, split: split.into(), metric: metric.into(), value }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| NarsError::Serde(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| NarsError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| NarsError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| NarsError::Serde(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| NarsError::Serde(e.to_string()))).collect()
}
