//! Differentiable training objectives.
//!
//! Feature-norm terms (relative norm alignment and its source+target form,
//! temporal hard norm alignment), the multi-stream min-entropy consensus term,
//! cross-entropy for classification and domain discrimination, and the
//! attention-weighted entropy regularizer. All return scalar [`Var`]s.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{argmax, log_softmax_row, softmax_row, Tensor, TensorError, Var};

/// Log-probabilities are floored here before entering entropy or consensus sums.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(LossError::Contract(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source(usize),
    Target,
}

/// Features of one modality for one batch of samples.
#[derive(Debug, Clone)]
pub struct ModalityBatch<'g> {
    pub modality: String,
    /// `[N×d]`, one row per sample.
    pub features: Var<'g>,
    pub domain: DomainTag,
}

impl<'g> ModalityBatch<'g> {
    pub fn new(modality: impl Into<String>, features: Var<'g>, domain: DomainTag) -> Self {
        Self {
            modality: modality.into(),
            features,
            domain,
        }
    }
}

/// Scalar weights of the composite objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rna: f64,
    pub lambda_thna: f64,
    pub radius_r: f64,
    pub lambda_mec: f64,
    pub gamma_attentive: f64,
    /// Frame, relation and video discriminator weights.
    pub beta_levels: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rna: 1.0,
            lambda_thna: 0.0006,
            radius_r: 40.0,
            lambda_mec: 0.01,
            gamma_attentive: 0.003,
            beta_levels: [0.75, 0.75, 0.5],
        }
    }
}

impl LossWeights {
    /// Every weight zero; `radius_r` keeps its default.
    pub fn zeros() -> Self {
        Self {
            lambda_rna: 0.0,
            lambda_thna: 0.0,
            lambda_mec: 0.0,
            gamma_attentive: 0.0,
            beta_levels: [0.0; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_rna", self.lambda_rna),
            ("lambda_thna", self.lambda_thna),
            ("lambda_mec", self.lambda_mec),
            ("gamma_attentive", self.gamma_attentive),
            ("beta_levels[0]", self.beta_levels[0]),
            ("beta_levels[1]", self.beta_levels[1]),
            ("beta_levels[2]", self.beta_levels[2]),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return contract(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.radius_r > 0.0) || !self.radius_r.is_finite() {
            return contract(format!("radius_r must be > 0, got {}", self.radius_r));
        }
        Ok(())
    }
}

fn rows(v: &Var<'_>) -> usize {
    v.shape().first().copied().unwrap_or(1)
}

fn mean_norm<'g>(features: Var<'g>) -> Result<Var<'g>> {
    Ok(features.l2_norm_rows()?.mean())
}

/// Relative norm alignment across modalities.
///
/// With two batches this is `(E‖f₀‖ / E‖f₁‖ − 1)²`, the first batch being the
/// numerator. With more, the same term is averaged over every ordered pair.
pub fn rna_loss<'g>(batches: &[ModalityBatch<'g>]) -> Result<Var<'g>> {
    if batches.len() < 2 {
        return contract(format!("rna_loss needs at least 2 modalities, got {}", batches.len()));
    }
    let n = rows(&batches[0].features);
    if let Some(b) = batches.iter().find(|b| rows(&b.features) != n) {
        return contract(format!(
            "rna_loss: modality {} has {} samples, expected {n}",
            b.modality,
            rows(&b.features)
        ));
    }
    let means = batches
        .iter()
        .map(|b| mean_norm(b.features))
        .collect::<Result<Vec<_>>>()?;
    let term = |i: usize, j: usize| -> Result<Var<'g>> { Ok(means[i].div(means[j])?.add_scalar(-1.0).square()) };
    if means.len() == 2 {
        return term(0, 1);
    }
    let mut total: Option<Var<'g>> = None;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in 0..means.len() {
            if i == j {
                continue;
            }
            let t = term(i, j)?;
            total = Some(match total {
                Some(acc) => acc.add(t)?,
                None => t,
            });
            pairs += 1;
        }
    }
    Ok(total.expect("at least one pair").scalar_mul(1.0 / pairs as f64))
}

/// Source term plus target term of [`rna_loss`]. An empty target falls back
/// to the source term alone.
pub fn rna_uda_loss<'g>(source: &[ModalityBatch<'g>], target: &[ModalityBatch<'g>]) -> Result<Var<'g>> {
    if let Some(b) = source.iter().find(|b| b.domain == DomainTag::Target) {
        return contract(format!("rna_uda_loss: source batch {} is tagged target", b.modality));
    }
    if let Some(b) = target.iter().find(|b| b.domain != DomainTag::Target) {
        return contract(format!(
            "rna_uda_loss: target batch {} is tagged {:?}",
            b.modality, b.domain
        ));
    }
    let s = rna_loss(source)?;
    if target.is_empty() {
        log::warn!("rna_uda_loss called without target batches; using the source term only");
        return Ok(s);
    }
    Ok(s.add(rna_loss(target)?)?)
}

/// `Σ_b Σ_t (E‖h_t(X^b)‖ − R)²` over backbones `b` and relation scales `t`.
pub fn thna_loss<'g>(stream_scale_features: &[Vec<Var<'g>>], radius_r: f64) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for features in stream_scale_features.iter().flatten() {
        let t = mean_norm(*features)?.add_scalar(-radius_r).square();
        total = Some(match total {
            Some(acc) => acc.add(t)?,
            None => t,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => contract("thna_loss needs at least one (backbone, scale) feature set"),
    }
}

/// Floored row-wise log-probabilities.
fn clamped_log_probs<'g>(logits: Var<'g>) -> Var<'g> {
    logits.log_softmax().clamp_min(LOG_PROB_FLOOR)
}

/// Min-entropy consensus over `b` streams of `[m×C]` target logits:
/// `−(1/m) Σ_i (1/b) max_y Σ_b log p_b(y|x_i)`.
///
/// The per-sample maximum picks the lowest class index on ties, and the
/// gradient flows through the selected class only.
pub fn mec_loss<'g>(stream_logits: &[Var<'g>]) -> Result<Var<'g>> {
    let Some(first) = stream_logits.first() else {
        return contract("mec_loss needs at least one stream");
    };
    let shape = first.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return contract(format!("mec_loss expects [m×C] logits with C >= 2, got {shape:?}"));
    }
    if let Some(s) = stream_logits.iter().find(|s| s.shape() != shape) {
        return contract(format!("mec_loss: stream shape {:?} differs from {shape:?}", s.shape()));
    }
    let mut summed = clamped_log_probs(*first);
    for s in &stream_logits[1..] {
        summed = summed.add(clamped_log_probs(*s))?;
    }
    let best: Vec<usize> = summed.with_value(|t| (0..t.rows()).map(|r| argmax(t.row(r))).collect());
    let b = stream_logits.len() as f64;
    Ok(summed.gather(&best)?.mean().scalar_mul(-1.0 / b))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn classification_loss<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return contract(format!("classification_loss expects [N×C] logits, got {shape:?}"));
    }
    if labels.len() != shape[0] {
        return contract(format!(
            "classification_loss: {} labels for {} rows",
            labels.len(),
            shape[0]
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return contract(format!("label {bad} out of range for {} classes", shape[1]));
    }
    Ok(logits.log_softmax().gather(labels)?.mean().scalar_mul(-1.0))
}

/// Cross-entropy of a domain discriminator. Callers insert the gradient
/// reversal in front of the discriminator, not here.
pub fn domain_adversarial_loss<'g>(domain_logits: Var<'g>, domain_labels: &[usize]) -> Result<Var<'g>> {
    classification_loss(domain_logits, domain_labels)
}

/// Shannon entropy of softmax(row) divided by `ln(row.len())`, in `[0, 1]`.
/// A single-class row has zero entropy.
pub fn normalized_entropy(logits_row: &[f64]) -> f64 {
    if logits_row.len() < 2 {
        return 0.0;
    }
    let p = softmax_row(logits_row);
    let lp = log_softmax_row(logits_row);
    let h: f64 = p.iter().zip(&lp).map(|(p, lp)| -p * lp.max(LOG_PROB_FLOOR)).sum();
    h / (logits_row.len() as f64).ln()
}

/// `1 + normalized domain entropy` for every row; treated as a constant.
pub fn attention_weights(domain_logits: &Tensor) -> Vec<f64> {
    (0..domain_logits.rows())
        .map(|r| 1.0 + normalized_entropy(domain_logits.row(r)))
        .collect()
}

/// `(1/N) Σ_i (1 + Ĥ(d_i)) · H(ŷ_i)`: class-prediction entropy weighted by the
/// normalized domain-prediction entropy, with no gradient through the weight.
pub fn attentive_entropy_loss<'g>(class_logits: Var<'g>, domain_logits: Var<'g>) -> Result<Var<'g>> {
    let (cs, ds) = (class_logits.shape(), domain_logits.shape());
    if cs.len() != 2 || ds.len() != 2 || cs[0] != ds[0] {
        return contract(format!(
            "attentive_entropy_loss: class logits {cs:?} and domain logits {ds:?} must share rows"
        ));
    }
    let weights = domain_logits.with_value(attention_weights);
    let g = class_logits.graph();
    let entropy = class_logits
        .softmax()
        .mul(clamped_log_probs(class_logits))?
        .sum_rows()?
        .scalar_mul(-1.0);
    let w = g.constant(Tensor::vector(weights)?);
    Ok(entropy.mul(w)?.mean())
}

/// Loss terms of one mini-batch. Absent terms contribute nothing.
#[derive(Debug, Clone)]
pub struct LossParts<'g> {
    pub classification: Var<'g>,
    pub rna: Option<Var<'g>>,
    /// Frame, relation, video discriminator losses.
    pub adversarial: [Option<Var<'g>>; 3],
    pub attentive_entropy: Option<Var<'g>>,
    pub thna: Option<Var<'g>>,
    pub mec: Option<Var<'g>>,
}

impl<'g> LossParts<'g> {
    pub fn new(classification: Var<'g>) -> Self {
        Self {
            classification,
            rna: None,
            adversarial: [None; 3],
            attentive_entropy: None,
            thna: None,
            mec: None,
        }
    }
}

/// `L_cls + λ_RNA·L_RNA + Σ β_l·L_adv,l + γ·L_ae + λ_T-HNA·L_T-HNA + λ_MEC·L_MEC`.
pub fn total_uda_loss<'g>(parts: &LossParts<'g>, weights: &LossWeights) -> Result<Var<'g>> {
    let mut total = parts.classification;
    let mut add = |term: Option<Var<'g>>, w: f64| -> Result<()> {
        if let Some(t) = term {
            total = total.add(t.scalar_mul(w))?;
        }
        Ok(())
    };
    add(parts.rna, weights.lambda_rna)?;
    for (term, beta) in parts.adversarial.iter().zip(weights.beta_levels) {
        add(*term, beta)?;
    }
    add(parts.attentive_entropy, weights.gamma_attentive)?;
    add(parts.thna, weights.lambda_thna)?;
    add(parts.mec, weights.lambda_mec)?;
    Ok(total)
}
