//! Token-level average precision and loss over a dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::model::{Pathways, SlgNet};
use crate::params::Session;

/// Average precision of `scores` against binary `labels`, with tied scores
/// treated as one threshold. Zero when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> f64 {
    let positives = labels.iter().filter(|&&l| l > 0.5).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] > 0.5 {
                tp += 1;
            }
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub token_ap: f64,
    pub loss: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub token_ap: f64,
    pub loss: f64,
    /// Keyed by day/night group (`day`, `night`) and by individual condition
    /// (`condition/<name>`).
    pub condition_breakdown: BTreeMap<String, GroupMetrics>,
}

/// Per-token logits for every sample, optionally with caption embeddings
/// taken from other samples.
pub fn predict(model: &SlgNet, data: &Dataset, paths: Pathways, batch_size: usize, caption_source: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let captions = caption_source.unwrap_or(&all);
    let mut out = Vec::with_capacity(data.len());
    for (idx, cap) in all.chunks(batch_size.max(1)).zip(captions.chunks(batch_size.max(1))) {
        let (inputs, _) = data.batch_with_captions(idx, cap)?;
        let mut s = Session::new(&model.store);
        let y = model.forward(&mut s, &inputs, paths)?;
        let t = s.tape.shape(y)[1];
        out.extend(s.tape.data(y).chunks(t).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn bce(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn group_metrics(logits: &[&Vec<f64>], labels: &[&Vec<f64>]) -> GroupMetrics {
    let scores: Vec<f64> = logits.iter().flat_map(|v| v.iter().copied()).collect();
    let targets: Vec<f64> = labels.iter().flat_map(|v| v.iter().copied()).collect();
    let loss = scores.iter().zip(&targets).map(|(&l, &t)| bce(l, t)).sum::<f64>() / scores.len() as f64;
    GroupMetrics { token_ap: average_precision(&scores, &targets), loss, samples: logits.len() }
}

/// Metrics from precomputed logits.
pub fn score(data: &Dataset, logits: &[Vec<f64>]) -> Result<Metrics> {
    if data.is_empty() || logits.len() != data.len() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<&Vec<f64>> = data.samples.iter().map(|s| &s.heatmap).collect();
    let all = group_metrics(&logits.iter().collect::<Vec<_>>(), &labels);
    let mut breakdown = BTreeMap::new();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        groups.entry(s.condition.group().to_string()).or_default().push(i);
        groups.entry(format!("condition/{}", s.condition.name())).or_default().push(i);
    }
    for (key, idx) in groups {
        let l: Vec<&Vec<f64>> = idx.iter().map(|&i| &logits[i]).collect();
        let t: Vec<&Vec<f64>> = idx.iter().map(|&i| labels[i]).collect();
        breakdown.insert(key, group_metrics(&l, &t));
    }
    Ok(Metrics { token_ap: all.token_ap, loss: all.loss, condition_breakdown: breakdown })
}

pub fn evaluate(model: &SlgNet, data: &Dataset, paths: Pathways, batch_size: usize) -> Result<Metrics> {
    let logits = predict(model, data, paths, batch_size, None)?;
    score(data, &logits)
}
