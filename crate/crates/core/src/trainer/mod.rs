//! Training loops, optimizer, evaluation and norm diagnostics.
//!
//! One optimization step runs every stream over the same mini-batch of
//! pooled source clips, followed by a mini-batch of unlabeled target clips
//! when an active term needs them. The per-stream losses are summed into a
//! single objective so cross-stream terms (hard norm alignment, consensus)
//! can couple the streams.

mod config;
mod metrics;
mod optim;
mod presets;
mod report;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::{ClipSet, DataError, FeatureDataset};
use crate::losses::{
    attentive_entropy_loss, classification_loss, domain_adversarial_loss, mec_loss, rna_loss, rna_uda_loss, thna_loss,
    total_uda_loss, DomainTag, LossError, LossParts, ModalityBatch,
};
use crate::models::{Adversary, ClipBatch, ForwardOptions, ModelError, StreamModel, StreamOutput};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use config::{Mode, StreamSpec, TermMask, TrainConfig};
pub use metrics::{evaluate, evaluate_split, metrics_from_scores, norm_ratio, norm_stats, Metrics, StreamNorms};
pub use optim::{grl_lambda, sgd_step};
pub use presets::{preset_rows, preset_spec, run_preset, run_rows, Preset, PresetRow, PresetTable, CSV_HEADER};
pub use report::{read_report_jsonl, write_report, EpochRecord, TrainReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite { term: String, epoch: usize, step: usize },
    #[error("target labels were read {reads} time(s) during training")]
    LabelHygiene { reads: usize },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Trained streams and the per-epoch record of how they got there.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub streams: Vec<StreamModel>,
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const TARGET_STREAM: u64 = 0x7461_7267_6574;

/// Freshly initialized streams for `config` on `data`.
pub fn build_streams(config: &TrainConfig, data: &FeatureDataset) -> Result<Vec<StreamModel>> {
    let attention = config.active_terms().adversarial;
    config
        .streams
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let resolved = s.resolve(data.spec(), attention, mix(config.seed, 2 * i as u64 + 1))?;
            Ok(StreamModel::new(resolved, mix(config.seed, 2 * i as u64))?)
        })
        .collect()
}

fn stack(a: ClipBatch, b: Option<ClipBatch>) -> ClipBatch {
    let Some(b) = b else { return a };
    let modalities = a
        .modalities
        .into_iter()
        .zip(b.modalities)
        .map(|((name, x), (_, y))| {
            let cols = x.cols();
            let mut values = x.into_values();
            values.extend_from_slice(y.values());
            let rows = values.len() / cols;
            (name, Tensor::matrix(rows, cols, values).expect("same widths"))
        })
        .collect();
    ClipBatch {
        clips: a.clips + b.clips,
        frames: a.frames,
        modalities,
    }
}

/// Row layout of one step: `source` labeled clips, then `target` unlabeled ones.
struct StepRows {
    source: usize,
    target: usize,
    frames: usize,
    verbs: Vec<usize>,
    nouns: Vec<usize>,
    /// Domain label per clip, target clips tagged with the source count.
    domains: Vec<usize>,
}

impl StepRows {
    fn frame_domains(&self) -> Vec<usize> {
        self.domains
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d, self.frames))
            .collect()
    }
}

fn sum_opt<'g>(acc: Option<Var<'g>>, t: Var<'g>) -> Result<Option<Var<'g>>> {
    Ok(Some(match acc {
        Some(a) => a.add(t)?,
        None => t,
    }))
}

fn mean_of<'g>(terms: &[Var<'g>]) -> Result<Var<'g>> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = acc.add(*t)?;
    }
    Ok(acc.scalar_mul(1.0 / terms.len() as f64))
}

fn stream_terms<'g>(
    out: &StreamOutput<'g>,
    model: &StreamModel,
    rows: &StepRows,
    mask: &TermMask,
    parts: &mut LossParts<'g>,
) -> Result<()> {
    let src = rows.source;
    let verb = out.verb_logits.slice_rows(0, src)?;
    let noun = out.noun_logits.slice_rows(0, src)?;
    let cls = classification_loss(verb, &rows.verbs)?.add(classification_loss(noun, &rows.nouns)?)?;
    parts.classification = parts.classification.add(cls)?;

    if mask.rna && out.modality_features.len() >= 2 {
        let names = &model.config().modalities;
        let split = |start: usize, end: usize, tag: DomainTag| -> Result<Vec<ModalityBatch<'g>>> {
            names
                .iter()
                .zip(&out.modality_features)
                .map(|(m, f)| Ok(ModalityBatch::new(m.name.clone(), f.slice_rows(start, end)?, tag)))
                .collect()
        };
        let frames = rows.frames;
        let source = split(0, src * frames, DomainTag::Source(0))?;
        let term = if mask.rna_target && rows.target > 0 {
            let target = split(src * frames, (src + rows.target) * frames, DomainTag::Target)?;
            rna_uda_loss(&source, &target)?
        } else {
            rna_loss(&source)?
        };
        parts.rna = sum_opt(parts.rna, term)?;
    }

    if mask.adversarial {
        let frame_labels = rows.frame_domains();
        let mut levels: [Vec<Var<'g>>; 3] = Default::default();
        for b in &out.branches {
            let d = b
                .domain
                .as_ref()
                .ok_or_else(|| TrainError::Contract("missing domain logits".into()))?;
            levels[0].push(domain_adversarial_loss(d.frame, &frame_labels)?);
            let rel: Vec<Var<'g>> = d
                .relations
                .iter()
                .map(|r| domain_adversarial_loss(*r, &rows.domains))
                .collect::<std::result::Result<_, _>>()?;
            levels[1].push(mean_of(&rel)?);
            levels[2].push(domain_adversarial_loss(d.video, &rows.domains)?);
        }
        for (slot, terms) in parts.adversarial.iter_mut().zip(&levels) {
            *slot = sum_opt(*slot, mean_of(terms)?)?;
        }
    }

    if mask.attentive_entropy {
        let mut per_branch = Vec::with_capacity(out.branches.len());
        for b in &out.branches {
            let d = b
                .domain
                .as_ref()
                .ok_or_else(|| TrainError::Contract("missing domain logits".into()))?;
            let v = attentive_entropy_loss(b.verb_logits, d.video)?;
            let n = attentive_entropy_loss(b.noun_logits, d.video)?;
            per_branch.push(v.add(n)?);
        }
        parts.attentive_entropy = sum_opt(parts.attentive_entropy, mean_of(&per_branch)?)?;
    }
    Ok(())
}

/// Loss values of one step, unweighted, in report order.
fn term_values(parts: &LossParts<'_>, total: Var<'_>) -> Vec<(&'static str, f64)> {
    let mut v = vec![("cls", parts.classification.item())];
    if let Some(t) = parts.rna {
        v.push(("rna", t.item()));
    }
    for (name, t) in ["adv_frame", "adv_relation", "adv_video"]
        .into_iter()
        .zip(&parts.adversarial)
    {
        if let Some(t) = t {
            v.push((name, t.item()));
        }
    }
    if let Some(t) = parts.attentive_entropy {
        v.push(("attentive_entropy", t.item()));
    }
    if let Some(t) = parts.thna {
        v.push(("thna", t.item()));
    }
    if let Some(t) = parts.mec {
        v.push(("mec", t.item()));
    }
    v.push(("total", total.item()));
    v
}

fn epoch_record(
    epoch: usize,
    lr: f64,
    grl: f64,
    losses: BTreeMap<String, f64>,
    streams: &[StreamModel],
    data: &FeatureDataset,
) -> Result<EpochRecord> {
    let metrics = evaluate(streams, data.target_test())?;
    let norms = norm_stats(streams, data)?;
    let ratio = norm_ratio(&norms, data);
    Ok(EpochRecord {
        epoch,
        lr,
        grl_lambda: grl,
        losses,
        metrics,
        norms,
        norm_ratio: ratio,
    })
}

/// Trains the configured streams and evaluates the ensemble on `target_test`
/// after every epoch; epoch 0 is the untrained evaluation.
pub fn train(config: &TrainConfig, data: &FeatureDataset) -> Result<TrainOutcome> {
    config.validate()?;
    let mut streams = build_streams(config, data)?;
    let mask = config.active_terms();
    let mut epochs = vec![epoch_record(0, 0.0, 0.0, BTreeMap::new(), &streams, data)?];
    let mut reads = 0;

    if !config.eval_only {
        let before = data.target_label_reads();
        let pool = data.source_pool()?;
        let target = mask.uses_target().then(|| data.target_train().clips());
        reads += data.target_label_reads() - before;
        let steps_per_epoch = {
            let s = pool.clips.clips.div_ceil(config.batch_size);
            target.map_or(s, |t| s.max(t.clips.div_ceil(config.batch_size)))
        };
        let total_steps = steps_per_epoch * config.epochs;
        let mut velocity: Vec<Vec<Tensor>> = streams
            .iter()
            .map(|s| {
                s.params()
                    .iter()
                    .map(|p| Tensor::zeros(p.shape().to_vec()).expect("shape"))
                    .collect()
            })
            .collect();
        let mut step = 0usize;

        for epoch in 1..=config.epochs {
            let before = data.target_label_reads();
            let lr = config.learning_rate_at(epoch);
            let src_batches =
                crate::data::batch_indices(pool.clips.clips, config.batch_size, config.seed, epoch as u64)?;
            let plan: Vec<(Vec<usize>, Option<Vec<usize>>)> = match target {
                Some(t) => {
                    let tgt = crate::data::batch_indices(
                        t.clips,
                        config.batch_size,
                        mix(config.seed, TARGET_STREAM),
                        epoch as u64,
                    )?;
                    crate::data::cycle_zip(src_batches, tgt)
                        .into_iter()
                        .map(|(s, t)| (s, Some(t)))
                        .collect()
                }
                None => src_batches.into_iter().map(|s| (s, None)).collect(),
            };
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            let batches = plan.len();
            for (src_idx, tgt_idx) in plan {
                let lambda = grl_lambda(step as f64 / total_steps as f64);
                let values = train_step(
                    config,
                    &mask,
                    &mut streams,
                    &mut velocity,
                    data,
                    &pool,
                    target,
                    &src_idx,
                    tgt_idx.as_deref(),
                    lr,
                    lambda,
                    step,
                )
                .map_err(|e| match e {
                    TrainError::NonFinite { term, step, .. } => TrainError::NonFinite { term, epoch, step },
                    other => other,
                })?;
                for (name, v) in values {
                    *sums.entry(name.to_string()).or_default() += v;
                }
                step += 1;
            }
            let losses = sums.into_iter().map(|(k, v)| (k, v / batches as f64)).collect();
            let grl = grl_lambda(step as f64 / total_steps as f64);
            let training_reads = data.target_label_reads() - before;
            if training_reads > 0 {
                return Err(TrainError::LabelHygiene { reads: training_reads });
            }
            reads += training_reads;
            let record = epoch_record(
                epoch,
                lr,
                if mask.adversarial { grl } else { 0.0 },
                losses,
                &streams,
                data,
            )?;
            log::info!(
                "epoch {epoch}: total {:.4} verb {:.1} noun {:.1} action {:.1} norm ratio {:.3}",
                record.losses["total"],
                record.metrics.verb_top1,
                record.metrics.noun_top1,
                record.metrics.action_top1,
                record.norm_ratio
            );
            epochs.push(record);
        }
    }
    if reads > 0 {
        return Err(TrainError::LabelHygiene { reads });
    }
    Ok(TrainOutcome {
        report: TrainReport {
            config: config.clone(),
            active_terms: mask,
            epochs,
            target_label_reads: reads,
        },
        streams,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &TrainConfig,
    mask: &TermMask,
    streams: &mut [StreamModel],
    velocity: &mut [Vec<Tensor>],
    data: &FeatureDataset,
    pool: &crate::data::SourcePool,
    target: Option<&ClipSet>,
    src_idx: &[usize],
    tgt_idx: Option<&[usize]>,
    lr: f64,
    lambda: f64,
    step: usize,
) -> Result<Vec<(&'static str, f64)>> {
    let batch = stack(
        pool.clips.gather(src_idx),
        target.zip(tgt_idx).map(|(t, idx)| t.gather(idx)),
    );
    let n_tgt = tgt_idx.map_or(0, <[usize]>::len);
    let k = data.spec().source_domains;
    let rows = StepRows {
        source: src_idx.len(),
        target: n_tgt,
        frames: batch.frames,
        verbs: src_idx.iter().map(|&i| pool.labels[i].verb).collect(),
        nouns: src_idx.iter().map(|&i| pool.labels[i].noun).collect(),
        domains: src_idx
            .iter()
            .map(|&i| pool.domains[i])
            .chain(std::iter::repeat_n(k, n_tgt))
            .collect(),
    };

    let graph = Graph::new();
    let bound: Vec<Vec<Var<'_>>> = streams.iter().map(|s| s.bind(&graph)).collect();
    let mut parts = LossParts::new(graph.scalar(0.0));
    let mut relation_sets = Vec::with_capacity(streams.len());
    let mut verb_target = Vec::with_capacity(streams.len());
    let mut noun_target = Vec::with_capacity(streams.len());
    for (i, (s, p)) in streams.iter().zip(&bound).enumerate() {
        let opts = ForwardOptions {
            adversary: if mask.adversarial {
                Adversary::Reversed(lambda)
            } else {
                Adversary::Off
            },
            dropout: (config.dropout > 0.0)
                .then(|| (config.dropout, mix(config.seed, (step * streams.len() + i) as u64 + 1))),
        };
        let out = s.forward(p, &batch, &opts)?;
        stream_terms(&out, s, &rows, mask, &mut parts)?;
        relation_sets.push(
            out.branches
                .iter()
                .flat_map(|b| b.relations.iter().copied())
                .collect::<Vec<_>>(),
        );
        if mask.mec && n_tgt > 0 {
            verb_target.push(out.verb_logits.slice_rows(rows.source, rows.source + n_tgt)?);
            noun_target.push(out.noun_logits.slice_rows(rows.source, rows.source + n_tgt)?);
        }
    }
    if mask.thna {
        parts.thna = Some(thna_loss(&relation_sets, config.weights.radius_r)?);
    }
    if mask.mec && n_tgt > 0 {
        parts.mec = Some(mec_loss(&verb_target)?.add(mec_loss(&noun_target)?)?);
    }
    let total = total_uda_loss(&parts, &config.weights)?;
    let values = term_values(&parts, total);
    if let Some((name, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            term: (*name).to_string(),
            epoch: 0,
            step,
        });
    }

    graph.backward(total)?;
    for ((s, p), v) in streams.iter_mut().zip(&bound).zip(velocity.iter_mut()) {
        let grads: Vec<Tensor> = p
            .iter()
            .map(|x| x.grad().unwrap_or_else(|| Tensor::zeros(x.shape()).expect("shape")))
            .collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                term: "gradient".into(),
                epoch: 0,
                step,
            });
        }
        sgd_step(s.params_mut(), &grads, v, lr, config.momentum)?;
    }
    Ok(values)
}
