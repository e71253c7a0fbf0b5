use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::data::{ActionLabel, ClipSet, FeatureDataset, LabeledSplit, SplitKind};
use crate::models::{ensemble_predict, StreamModel};
use crate::tensor::{Graph, Tensor};

/// Accuracies in percent over one labeled split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub verb_top1: f64,
    pub verb_top5: f64,
    pub noun_top1: f64,
    pub noun_top5: f64,
    pub action_top1: f64,
    pub action_top5: f64,
    /// Mean of the verb and noun rates at which every stream has the same argmax.
    pub agreement: f64,
}

/// Rank of `target` when classes are ordered by descending score, ties broken
/// toward the lower index.
fn rank(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count()
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Metrics from per-sample class scores (probabilities or logits) of both heads.
pub fn metrics_from_scores(
    verb: &Tensor,
    noun: &Tensor,
    labels: &[ActionLabel],
    verb_agree: &[bool],
    noun_agree: &[bool],
) -> Result<Metrics> {
    let n = labels.len();
    if n == 0 || verb.rows() != n || noun.rows() != n || verb_agree.len() != n || noun_agree.len() != n {
        return Err(TrainError::Contract(format!(
            "metrics: {n} labels for {} verb rows, {} noun rows",
            verb.rows(),
            noun.rows()
        )));
    }
    let (c_v, c_n) = (verb.cols(), noun.cols());
    let mut hits = [0usize; 6];
    let mut pair_scores = vec![0.0; c_v * c_n];
    for (i, l) in labels.iter().enumerate() {
        if l.verb >= c_v || l.noun >= c_n {
            return Err(TrainError::Contract(format!("label {l:?} out of range")));
        }
        let (vr, nr) = (rank(verb.row(i), l.verb), rank(noun.row(i), l.noun));
        for (a, b) in verb.row(i).iter().enumerate() {
            for (c, d) in noun.row(i).iter().enumerate() {
                pair_scores[a * c_n + c] = b * d;
            }
        }
        let ar = rank(&pair_scores, l.verb * c_n + l.noun);
        hits[0] += usize::from(vr == 0);
        hits[1] += usize::from(vr < 5);
        hits[2] += usize::from(nr == 0);
        hits[3] += usize::from(nr < 5);
        hits[4] += usize::from(vr == 0 && nr == 0);
        hits[5] += usize::from(ar < 5);
    }
    let agree = verb_agree.iter().filter(|a| **a).count() + noun_agree.iter().filter(|a| **a).count();
    Ok(Metrics {
        samples: n,
        verb_top1: percent(hits[0], n),
        verb_top5: percent(hits[1], n),
        noun_top1: percent(hits[2], n),
        noun_top5: percent(hits[3], n),
        action_top1: percent(hits[4], n),
        action_top5: percent(hits[5], n),
        agreement: percent(agree, 2 * n),
    })
}

/// Ensemble metrics of `streams` on a labeled split.
pub fn evaluate(streams: &[StreamModel], split: &LabeledSplit) -> Result<Metrics> {
    let pred = ensemble_predict(streams, &split.clips().all())?;
    metrics_from_scores(
        &pred.verb,
        &pred.noun,
        split.labels(),
        &pred.verb_agree,
        &pred.noun_agree,
    )
}

/// Metrics on the split named `kind`; the unlabeled target split is refused.
pub fn evaluate_split(streams: &[StreamModel], data: &FeatureDataset, kind: SplitKind) -> Result<Metrics> {
    let split = data
        .labeled(kind)
        .map_err(|_| TrainError::Contract(format!("split {kind} has no labels to evaluate against")))?;
    evaluate(streams, split)
}

/// Mean extractor-output row norms of one stream: modality → split → norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamNorms {
    pub stream: usize,
    pub modalities: BTreeMap<String, BTreeMap<String, f64>>,
}

fn split_norms(stream: &StreamModel, set: &ClipSet) -> Result<Vec<f64>> {
    let graph = Graph::new();
    let p = stream.bind_frozen(&graph);
    let features = stream.extract_features(&p, &set.all())?;
    features.iter().map(|f| Ok(f.l2_norm_rows()?.mean().item())).collect()
}

/// Full-split means of per-frame L2 norms of every extractor output, for every split.
pub fn norm_stats(streams: &[StreamModel], data: &FeatureDataset) -> Result<Vec<StreamNorms>> {
    let kinds = data.split_kinds();
    streams
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut modalities: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
            for kind in &kinds {
                let norms = split_norms(s, data.clip_set(*kind)?)?;
                for (m, v) in s.config().modalities.iter().zip(norms) {
                    modalities
                        .entry(m.name.clone())
                        .or_default()
                        .insert(kind.to_string(), v);
                }
            }
            Ok(StreamNorms { stream: i, modalities })
        })
        .collect()
}

/// Largest max/min ratio of source-pooled modality mean norms over streams
/// with at least two modalities; 1 when there are none.
pub fn norm_ratio(norms: &[StreamNorms], data: &FeatureDataset) -> f64 {
    let sources: Vec<(String, f64)> = data
        .sources()
        .iter()
        .map(|s| (s.kind().to_string(), s.len() as f64))
        .collect();
    let total: f64 = sources.iter().map(|(_, n)| n).sum();
    norms
        .iter()
        .filter(|s| s.modalities.len() >= 2)
        .map(|s| {
            let pooled: Vec<f64> = s
                .modalities
                .values()
                .map(|per_split| sources.iter().map(|(k, n)| per_split[k] * n).sum::<f64>() / total)
                .collect();
            let max = pooled.iter().copied().fold(f64::MIN, f64::max);
            let min = pooled.iter().copied().fold(f64::MAX, f64::min);
            max / min
        })
        .fold(1.0, f64::max)
}
