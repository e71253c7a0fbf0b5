use super::{ClipBatch, ForwardOptions, ModelError, Result, StreamModel};
use crate::tensor::{argmax, softmax_row, Graph, Tensor};

/// Averaged class probabilities of several streams.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// `[clips × verb_classes]`.
    pub verb: Tensor,
    /// `[clips × noun_classes]`.
    pub noun: Tensor,
    /// Per sample: every stream has the same verb argmax.
    pub verb_agree: Vec<bool>,
    pub noun_agree: Vec<bool>,
}

fn probabilities(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows()).map(|r| softmax_row(logits.row(r))).collect()
}

fn average(per_stream: &[Vec<Vec<f64>>]) -> Result<(Tensor, Vec<bool>)> {
    let rows = per_stream[0].len();
    let cols = per_stream[0][0].len();
    let mut values = vec![0.0; rows * cols];
    for probs in per_stream {
        for (r, row) in probs.iter().enumerate() {
            for (c, p) in row.iter().enumerate() {
                values[r * cols + c] += p;
            }
        }
    }
    let n = per_stream.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    let agree = (0..rows)
        .map(|r| {
            let first = argmax(&per_stream[0][r]);
            per_stream.iter().all(|p| argmax(&p[r]) == first)
        })
        .collect();
    Ok((Tensor::matrix(rows, cols, values)?, agree))
}

/// Mean of per-stream softmax scores per head, summed in stream-list order.
pub fn ensemble_predict(streams: &[StreamModel], batch: &ClipBatch) -> Result<EnsemblePrediction> {
    if streams.is_empty() {
        return Err(ModelError::Contract(
            "ensemble_predict needs at least one stream".into(),
        ));
    }
    let (c_v, c_n) = (streams[0].config().verb_classes, streams[0].config().noun_classes);
    if streams
        .iter()
        .any(|s| s.config().verb_classes != c_v || s.config().noun_classes != c_n)
    {
        return Err(ModelError::Contract("streams disagree on class counts".into()));
    }
    let mut verb = Vec::with_capacity(streams.len());
    let mut noun = Vec::with_capacity(streams.len());
    for s in streams {
        let g = Graph::new();
        let p = s.bind_frozen(&g);
        let out = s.forward(&p, batch, &ForwardOptions::inference())?;
        verb.push(probabilities(&out.verb_logits.value()));
        noun.push(probabilities(&out.noun_logits.value()));
    }
    let (verb, verb_agree) = average(&verb)?;
    let (noun, noun_agree) = average(&noun)?;
    Ok(EnsemblePrediction {
        verb,
        noun,
        verb_agree,
        noun_agree,
    })
}
