//! Per-modality extractors, fusion, the multi-scale temporal relation module,
//! classifier heads, domain discriminators and domain attention.
//!
//! A [`StreamModel`] owns its parameters as a flat list of tensors. A forward
//! pass first binds them into a [`Graph`] with [`StreamModel::bind`] and then
//! addresses them by index through a layout derived from the
//! [`StreamConfig`], so the parameter set is a pure function of the config.

mod checkpoint;
mod ensemble;
mod trm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{attention_weights, LOG_PROB_FLOOR};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_VERSION,
};
pub use ensemble::{ensemble_predict, EnsemblePrediction};
pub use trm::{relation_subsets, MAX_SUBSETS};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid stream config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// One relation module and head pair per modality; class probabilities are averaged.
    Late,
    /// Modality embeddings are summed into one frame embedding before a shared relation module.
    Mid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityInput {
    pub name: String,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub modalities: Vec<ModalityInput>,
    /// Hidden layer widths of each modality extractor; empty means a single layer.
    pub extractor_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub relation_dim: usize,
    pub trm_scales: Vec<usize>,
    pub verb_classes: usize,
    pub noun_classes: usize,
    pub domain_count: usize,
    pub fusion: Fusion,
    pub discriminator_hidden: usize,
    /// Re-weight relation features by relation-discriminator uncertainty.
    pub domain_attention: bool,
    /// Seeds frame-subset sampling when a scale has more than `MAX_SUBSETS` subsets.
    pub subset_seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.modalities.is_empty() {
            return err("at least one modality is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.input_dim == 0 {
                return err(format!("modality {} has input_dim 0", m.name));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return err(format!("duplicate modality {}", m.name));
            }
        }
        if self.embed_dim == 0 || self.relation_dim == 0 || self.discriminator_hidden == 0 {
            return err("embed_dim, relation_dim and discriminator_hidden must be positive".into());
        }
        if self.extractor_hidden.contains(&0) {
            return err("extractor hidden sizes must be positive".into());
        }
        if self.trm_scales.is_empty() {
            return err("trm_scales must not be empty".into());
        }
        if let Some(k) = self.trm_scales.iter().find(|&&k| k < 2) {
            return err(format!("relation scale {k} is below 2"));
        }
        if self.verb_classes == 0 || self.noun_classes == 0 || self.domain_count == 0 {
            return err("class and domain counts must be positive".into());
        }
        Ok(())
    }

    /// Checks the relation scales against the clip length.
    pub fn validate_frames(&self, frames: usize) -> Result<()> {
        match self.trm_scales.iter().find(|&&k| k > frames) {
            Some(k) => Err(ModelError::Config(format!(
                "relation scale {k} exceeds {frames} frames per clip"
            ))),
            None => Ok(()),
        }
    }

    pub fn branch_count(&self) -> usize {
        match self.fusion {
            Fusion::Mid => 1,
            Fusion::Late => self.modalities.len(),
        }
    }
}

/// Clips of `frames` frames each; one `[clips·frames × input_dim]` matrix per
/// modality, clip-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    pub clips: usize,
    pub frames: usize,
    pub modalities: Vec<(String, Tensor)>,
}

impl ClipBatch {
    pub fn modality(&self, name: &str) -> Option<&Tensor> {
        self.modalities.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Adversary {
    /// No discriminator outputs.
    Off,
    /// Discriminators behind a gradient reversal with the given strength.
    Reversed(f64),
    /// Discriminators without reversal, for gradient checking the full objective.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub adversary: Adversary,
    /// Inverted dropout on extractor outputs: `(rate, seed)`.
    pub dropout: Option<(f64, u64)>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            adversary: Adversary::Off,
            dropout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Frame,
    Relation,
    Video,
}

#[derive(Debug, Clone)]
pub struct DomainLogits<'g> {
    pub frame: Var<'g>,
    pub relations: Vec<Var<'g>>,
    pub video: Var<'g>,
}

#[derive(Debug, Clone)]
pub struct BranchOutput<'g> {
    /// Frame embeddings entering the relation module.
    pub frames: Var<'g>,
    /// Post-activation relation features per scale, before attention.
    pub relations: Vec<Var<'g>>,
    pub video: Var<'g>,
    pub verb_logits: Var<'g>,
    pub noun_logits: Var<'g>,
    pub domain: Option<DomainLogits<'g>>,
}

#[derive(Debug, Clone)]
pub struct StreamOutput<'g> {
    /// Extractor outputs per modality, `[clips·frames × embed_dim]`.
    pub modality_features: Vec<Var<'g>>,
    pub branches: Vec<BranchOutput<'g>>,
    pub verb_logits: Var<'g>,
    pub noun_logits: Var<'g>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
struct BranchLayout {
    relations: Vec<Mlp>,
    verb: Linear,
    noun: Linear,
    frame_disc: Mlp,
    relation_disc: Mlp,
    video_disc: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    extractors: Vec<Mlp>,
    branches: Vec<BranchLayout>,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        let weight = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![input, output],
            fan_in: input,
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![output],
            fan_in: input,
        });
        Linear {
            weight,
            bias: weight + 1,
        }
    }

    fn mlp(&mut self, name: &str, input: usize, widths: &[usize]) -> Mlp {
        let mut prev = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = self.linear(&format!("{name}.{i}"), prev, w);
                prev = w;
                l
            })
            .collect();
        Mlp { layers }
    }
}

impl Layout {
    fn build(config: &StreamConfig) -> (Self, Vec<ParamSpec>) {
        let mut b = LayoutBuilder::default();
        let mut widths = config.extractor_hidden.clone();
        widths.push(config.embed_dim);
        let extractors = config
            .modalities
            .iter()
            .map(|m| b.mlp(&format!("extractor.{}", m.name), m.input_dim, &widths))
            .collect();
        let (d_e, d_r, h) = (config.embed_dim, config.relation_dim, config.discriminator_hidden);
        let branches = (0..config.branch_count())
            .map(|i| {
                let p = format!("branch{i}");
                BranchLayout {
                    relations: config
                        .trm_scales
                        .iter()
                        .map(|&k| b.mlp(&format!("{p}.relation{k}"), k * d_e, &[d_r]))
                        .collect(),
                    verb: b.linear(&format!("{p}.verb"), d_r, config.verb_classes),
                    noun: b.linear(&format!("{p}.noun"), d_r, config.noun_classes),
                    frame_disc: b.mlp(&format!("{p}.disc_frame"), d_e, &[h, config.domain_count]),
                    relation_disc: b.mlp(&format!("{p}.disc_relation"), d_r, &[h, config.domain_count]),
                    video_disc: b.mlp(&format!("{p}.disc_video"), d_r, &[h, config.domain_count]),
                }
            })
            .collect();
        (Self { extractors, branches }, b.specs)
    }
}

fn linear<'g>(p: &[Var<'g>], l: Linear, x: Var<'g>) -> Result<Var<'g>> {
    Ok(x.matmul(p[l.weight])?.add_bias(p[l.bias])?)
}

/// Affine layers with a rectifier after every layer, or every layer but the last.
fn mlp<'g>(p: &[Var<'g>], m: &Mlp, mut x: Var<'g>, final_relu: bool) -> Result<Var<'g>> {
    let last = m.layers.len() - 1;
    for (i, &l) in m.layers.iter().enumerate() {
        x = linear(p, l, x)?;
        if i < last || final_relu {
            x = x.relu();
        }
    }
    Ok(x)
}

/// One backbone stream: extractors, fusion, relation module, heads and
/// discriminators.
#[derive(Debug, Clone)]
pub struct StreamModel {
    config: StreamConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl PartialEq for StreamModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl StreamModel {
    /// Parameters drawn uniformly from `±1/√fan_in`.
    pub fn new(config: StreamConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |spec| {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let n = spec.shape.iter().product();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        })
    }

    /// All parameters zero.
    pub fn zeros(config: StreamConfig) -> Result<Self> {
        Self::build(config, |spec| vec![0.0; spec.shape.iter().product()])
    }

    fn build(config: StreamConfig, mut init: impl FnMut(&ParamSpec) -> Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            params.push(Tensor::new(s.shape.clone(), init(s))?);
        }
        Ok(Self {
            config,
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_named_params(config: StreamConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        if named.len() != model.params.len() {
            return Err(ModelError::Contract(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != model.names[i] || t.shape() != model.params[i].shape() {
                return Err(ModelError::Contract(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    model.names[i],
                    model.params[i].shape(),
                    t.shape()
                )));
            }
            model.params[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(ModelError::Contract(format!(
                "expected {} values, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.params {
            let n = t.numel();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Registers every parameter as a gradient-tracking leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|t| graph.param(t.clone())).collect()
    }

    /// Same as [`bind`](Self::bind) with constant leaves.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|t| graph.constant(t.clone())).collect()
    }

    /// Per-frame embeddings for every configured modality, in config order.
    pub fn extract_features<'g>(&self, p: &[Var<'g>], batch: &ClipBatch) -> Result<Vec<Var<'g>>> {
        let graph = p[0].graph();
        let rows = batch.clips * batch.frames;
        self.config
            .modalities
            .iter()
            .zip(&self.layout.extractors)
            .map(|(m, ext)| {
                let x = batch
                    .modality(&m.name)
                    .ok_or_else(|| ModelError::Contract(format!("clip batch has no {} features", m.name)))?;
                if x.shape() != [rows, m.input_dim] {
                    return Err(ModelError::Contract(format!(
                        "{} features have shape {:?}, expected [{rows}, {}]",
                        m.name,
                        x.shape(),
                        m.input_dim
                    )));
                }
                mlp(p, ext, graph.constant(x.clone()), true)
            })
            .collect()
    }

    /// Multi-scale relation features for one branch.
    pub fn trm_forward<'g>(
        &self,
        p: &[Var<'g>],
        branch: usize,
        frame_embeddings: Var<'g>,
        clips: usize,
        frames: usize,
    ) -> Result<TrmOutput<'g>> {
        let layout = &self.layout.branches[branch];
        trm::forward(
            &self.config.trm_scales,
            self.config.subset_seed,
            frame_embeddings,
            clips,
            frames,
            |scale, x| mlp(p, &layout.relations[scale], x, true),
        )
    }

    /// Verb and noun logits from a video feature; no softmax.
    pub fn classify<'g>(&self, p: &[Var<'g>], branch: usize, video: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let layout = &self.layout.branches[branch];
        Ok((linear(p, layout.verb, video)?, linear(p, layout.noun, video)?))
    }

    /// Domain logits at `level`, behind a gradient reversal of strength `lambda_d`.
    pub fn discriminate_domain<'g>(
        &self,
        p: &[Var<'g>],
        branch: usize,
        features: Var<'g>,
        level: Level,
        lambda_d: Option<f64>,
    ) -> Result<Var<'g>> {
        let layout = &self.layout.branches[branch];
        let net = match level {
            Level::Frame => &layout.frame_disc,
            Level::Relation => &layout.relation_disc,
            Level::Video => &layout.video_disc,
        };
        let input = match lambda_d {
            Some(l) => features.grad_reverse(l),
            None => features,
        };
        mlp(p, net, input, false)
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], batch: &ClipBatch, opts: &ForwardOptions) -> Result<StreamOutput<'g>> {
        self.config.validate_frames(batch.frames)?;
        let graph = p[0].graph();
        let features = self.extract_features(p, batch)?;
        let mut fused_inputs = features.clone();
        if let Some((rate, seed)) = opts.dropout.filter(|(r, _)| *r > 0.0) {
            fused_inputs = fused_inputs
                .iter()
                .enumerate()
                .map(|(i, f)| dropout(graph, *f, rate, seed.wrapping_add(i as u64)))
                .collect::<Result<_>>()?;
        }
        let branch_inputs = match self.config.fusion {
            Fusion::Mid => vec![mid_fusion(&fused_inputs)?],
            Fusion::Late => fused_inputs,
        };
        let lambda = match opts.adversary {
            Adversary::Reversed(l) => Some(l),
            _ => None,
        };
        let adversarial = opts.adversary != Adversary::Off;

        let mut branches = Vec::with_capacity(branch_inputs.len());
        for (b, frames) in branch_inputs.into_iter().enumerate() {
            let trm = self.trm_forward(p, b, frames, batch.clips, batch.frames)?;
            let relation_logits = if adversarial || self.config.domain_attention {
                trm.relations
                    .iter()
                    .map(|r| self.discriminate_domain(p, b, *r, Level::Relation, lambda))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let video = if self.config.domain_attention {
                sum_all(&domain_attention(&trm.relations, &relation_logits)?)?
            } else {
                trm.video
            };
            let (verb_logits, noun_logits) = self.classify(p, b, video)?;
            let domain = if adversarial {
                Some(DomainLogits {
                    frame: self.discriminate_domain(p, b, frames, Level::Frame, lambda)?,
                    relations: relation_logits,
                    video: self.discriminate_domain(p, b, video, Level::Video, lambda)?,
                })
            } else {
                None
            };
            branches.push(BranchOutput {
                frames,
                relations: trm.relations,
                video,
                verb_logits,
                noun_logits,
                domain,
            });
        }

        let (verb_logits, noun_logits) = if branches.len() == 1 {
            (branches[0].verb_logits, branches[0].noun_logits)
        } else {
            let fuse = |pick: fn(&BranchOutput<'g>) -> Var<'g>| -> Result<Var<'g>> {
                let logits: Vec<Var<'g>> = branches.iter().map(pick).collect();
                Ok(late_fusion(&logits)?.clamp_min(LOG_PROB_FLOOR.exp()).log()?)
            };
            (fuse(|b| b.verb_logits)?, fuse(|b| b.noun_logits)?)
        };
        Ok(StreamOutput {
            modality_features: features,
            branches,
            verb_logits,
            noun_logits,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrmOutput<'g> {
    /// `[clips × relation_dim]` per scale.
    pub relations: Vec<Var<'g>>,
    /// Sum of the per-scale relation features.
    pub video: Var<'g>,
}

fn sum_all<'g>(vars: &[Var<'g>]) -> Result<Var<'g>> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = acc.add(*v)?;
    }
    Ok(acc)
}

fn dropout<'g>(graph: &'g Graph, x: Var<'g>, rate: f64, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    let shape = x.shape();
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Ok(x.mul(graph.constant(Tensor::new(shape, mask)?))?)
}

/// Elementwise sum of per-modality frame embeddings followed by a rectifier.
pub fn mid_fusion<'g>(embeddings: &[Var<'g>]) -> Result<Var<'g>> {
    let Some(first) = embeddings.first() else {
        return Err(ModelError::Contract("mid_fusion needs at least one modality".into()));
    };
    let shape = first.shape();
    if let Some(e) = embeddings.iter().find(|e| e.shape() != shape) {
        return Err(ModelError::Contract(format!(
            "mid_fusion: embedding shape {:?} differs from {shape:?}",
            e.shape()
        )));
    }
    Ok(sum_all(embeddings)?.relu())
}

/// Scales each relation feature row by `1 + normalized entropy` of its
/// domain prediction. The weights are constants for differentiation.
pub fn domain_attention<'g>(relations: &[Var<'g>], domain_logits: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
    if relations.len() != domain_logits.len() {
        return Err(ModelError::Contract(format!(
            "domain_attention: {} relation scales but {} domain logit sets",
            relations.len(),
            domain_logits.len()
        )));
    }
    relations
        .iter()
        .zip(domain_logits)
        .map(|(r, d)| {
            let weights = d.with_value(attention_weights);
            let shape = r.shape();
            if weights.len() != shape[0] {
                return Err(ModelError::Contract(format!(
                    "domain_attention: {} weights for {} rows",
                    weights.len(),
                    shape[0]
                )));
            }
            let cols = shape[1];
            let expanded: Vec<f64> = weights.iter().flat_map(|&w| std::iter::repeat_n(w, cols)).collect();
            let w = r.graph().constant(Tensor::new(shape, expanded)?);
            Ok(r.mul(w)?)
        })
        .collect()
}

/// Mean of the per-modality softmax scores, row by row.
pub fn late_fusion<'g>(logits: &[Var<'g>]) -> Result<Var<'g>> {
    let Some(first) = logits.first() else {
        return Err(ModelError::Contract("late_fusion needs at least one modality".into()));
    };
    let shape = first.shape();
    if let Some(l) = logits.iter().find(|l| l.shape() != shape) {
        return Err(ModelError::Contract(format!(
            "late_fusion: score shape {:?} differs from {shape:?}",
            l.shape()
        )));
    }
    let probs: Vec<Var<'g>> = logits.iter().map(|l| l.softmax()).collect();
    Ok(sum_all(&probs)?.scalar_mul(1.0 / logits.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{argmax, softmax_row};

    pub(crate) fn micro_config(fusion: Fusion) -> StreamConfig {
        StreamConfig {
            modalities: vec![
                ModalityInput {
                    name: "rgb".into(),
                    input_dim: 3,
                },
                ModalityInput {
                    name: "audio".into(),
                    input_dim: 2,
                },
            ],
            extractor_hidden: vec![4],
            embed_dim: 3,
            relation_dim: 3,
            trm_scales: vec![2],
            verb_classes: 2,
            noun_classes: 2,
            domain_count: 2,
            fusion,
            discriminator_hidden: 3,
            domain_attention: false,
            subset_seed: 0,
        }
    }

    fn batch(clips: usize, frames: usize, seed: u64) -> ClipBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |d: usize| {
            let n = clips * frames * d;
            Tensor::matrix(clips * frames, d, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        ClipBatch {
            clips,
            frames,
            modalities: vec![("rgb".into(), m(3)), ("audio".into(), m(2))],
        }
    }

    #[test]
    fn zero_model_gives_zero_embeddings_and_uniform_scores() {
        let model = StreamModel::zeros(micro_config(Fusion::Mid)).unwrap();
        let g = Graph::new();
        let p = model.bind(&g);
        let out = model
            .forward(&p, &batch(2, 3, 1), &ForwardOptions::inference())
            .unwrap();
        for f in &out.modality_features {
            assert!(f.value().values().iter().all(|v| *v == 0.0));
        }
        assert!(out.verb_logits.value().values().iter().all(|v| *v == 0.0));
        let probs = out.verb_logits.softmax().value();
        assert!(probs.values().iter().all(|v| (*v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn identity_single_layer_extractor_is_relu() {
        let mut cfg = micro_config(Fusion::Mid);
        cfg.extractor_hidden.clear();
        cfg.modalities[1].input_dim = 3;
        let mut model = StreamModel::zeros(cfg).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let names = model.param_names().to_vec();
        for (n, t) in names.iter().zip(model.params_mut()) {
            if n.starts_with("extractor.") && n.ends_with("weight") {
                *t = eye.clone();
            }
        }
        let input = Tensor::from_rows(&[vec![-1.0, 2.0, 0.5], vec![3.0, -0.5, -2.0]]).unwrap();
        let b = ClipBatch {
            clips: 1,
            frames: 2,
            modalities: vec![("rgb".into(), input.clone()), ("audio".into(), input.clone())],
        };
        let g = Graph::new();
        let p = model.bind(&g);
        let feats = model.extract_features(&p, &b).unwrap();
        assert_eq!(feats[0].value().values(), &[0.0, 2.0, 0.5, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_modality_is_contract_error() {
        let model = StreamModel::new(micro_config(Fusion::Mid), 3).unwrap();
        let mut b = batch(2, 2, 4);
        b.modalities.pop();
        let g = Graph::new();
        let p = model.bind(&g);
        assert!(matches!(model.extract_features(&p, &b), Err(ModelError::Contract(_))));
    }

    #[test]
    fn scales_beyond_clip_length_rejected() {
        let mut cfg = micro_config(Fusion::Mid);
        cfg.trm_scales = vec![2, 3];
        let model = StreamModel::new(cfg, 5).unwrap();
        let g = Graph::new();
        let p = model.bind(&g);
        assert!(matches!(
            model.forward(&p, &batch(2, 2, 6), &ForwardOptions::inference()),
            Err(ModelError::Config(_))
        ));
        let mut bad = micro_config(Fusion::Mid);
        bad.trm_scales = vec![1];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeded_init_is_deterministic_and_bounded() {
        let a = StreamModel::new(micro_config(Fusion::Late), 11).unwrap();
        let b = StreamModel::new(micro_config(Fusion::Late), 11).unwrap();
        let c = StreamModel::new(micro_config(Fusion::Late), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.param_names().iter().zip(a.params()) {
            let fan_in = if name.ends_with("bias") {
                // bias shares its weight's fan-in; recover it from the sibling
                let w = a
                    .param_names()
                    .iter()
                    .position(|n| *n == name.replace("bias", "weight"))
                    .unwrap();
                a.params()[w].shape()[0]
            } else {
                t.shape()[0]
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(t.values().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn param_count_is_function_of_config() {
        let cfg = micro_config(Fusion::Mid);
        let a = StreamModel::new(cfg.clone(), 1).unwrap();
        let b = StreamModel::zeros(cfg).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        // extractors: rgb 3·4+4 + 4·3+3, audio 2·4+4 + 4·3+3
        // relation2: 6·3+3; heads 2·(3·2+2); discriminators: (3·3+3 + 3·2+2)·3
        let expected = (16 + 15) + (12 + 15) + 21 + 16 + 3 * 20;
        assert_eq!(a.param_count(), expected);
        let late = StreamModel::zeros(micro_config(Fusion::Late)).unwrap();
        assert_eq!(late.param_count(), 31 + 27 + 2 * (21 + 16 + 60));
    }

    #[test]
    fn mid_fusion_examples() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![-1.0, 2.0], vec![0.5, -3.0]]).unwrap());
        assert_eq!(mid_fusion(&[a]).unwrap().value().values(), &[0.0, 2.0, 0.5, 0.0]);
        let b = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert_eq!(mid_fusion(&[b, b]).unwrap().value().values(), &[2.0, 4.0]);
        let c = g.constant(Tensor::zeros(vec![1, 3]).unwrap());
        assert!(mid_fusion(&[b, c]).is_err());
    }

    #[test]
    fn late_fusion_averages_rather_than_votes() {
        let g = Graph::new();
        let m1 = g.constant(Tensor::from_rows(&[vec![0.4f64.ln(), 0.6f64.ln()]]).unwrap());
        let m2 = g.constant(Tensor::from_rows(&[vec![0.7f64.ln(), 0.3f64.ln()]]).unwrap());
        let fused = late_fusion(&[m1, m2]).unwrap().value();
        assert!((fused.values()[0] - 0.55).abs() < 1e-12);
        assert!((fused.values()[1] - 0.45).abs() < 1e-12);
        assert_eq!(argmax(fused.values()), 0);
        let single = late_fusion(&[m1]).unwrap().value();
        assert!((single.values()[1] - 0.6).abs() < 1e-12);
        let same = late_fusion(&[m2, m2]).unwrap().value();
        assert!((same.values()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn domain_attention_extremes() {
        let g = Graph::new();
        let r = g.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let confident = g.constant(Tensor::from_rows(&[vec![900.0, 0.0], vec![0.0, 900.0]]).unwrap());
        let out = domain_attention(&[r], &[confident]).unwrap();
        assert_eq!(out[0].value(), r.value());
        let uniform = g.constant(Tensor::zeros(vec![2, 2]).unwrap());
        let out = domain_attention(&[r], &[uniform]).unwrap();
        assert_eq!(out[0].value().values(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn domain_attention_passes_no_gradient_to_logits() {
        let g = Graph::new();
        let r = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let d = g.param(Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap());
        let out = domain_attention(&[r], &[d]).unwrap();
        g.backward(out[0].sum()).unwrap();
        assert!(d.grad().is_none());
        let w = 1.0 + crate::losses::normalized_entropy(&[0.3, -0.2]);
        assert!(r.grad().unwrap().values().iter().all(|v| (*v - w).abs() < 1e-15));
    }

    #[test]
    fn discriminator_forward_independent_of_lambda() {
        let model = StreamModel::new(micro_config(Fusion::Mid), 9).unwrap();
        let g = Graph::new();
        let p = model.bind(&g);
        let x = g.param(Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap());
        let a = model.discriminate_domain(&p, 0, x, Level::Video, Some(0.0)).unwrap();
        let b = model.discriminate_domain(&p, 0, x, Level::Video, Some(0.9)).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn zero_lambda_blocks_feature_gradient() {
        let model = StreamModel::new(micro_config(Fusion::Mid), 10).unwrap();
        let g = Graph::new();
        let p = model.bind(&g);
        let x = g.param(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.3, -0.1, 0.0]]).unwrap());
        let logits = model.discriminate_domain(&p, 0, x, Level::Video, Some(0.0)).unwrap();
        g.backward(crate::losses::domain_adversarial_loss(logits, &[0, 1]).unwrap())
            .unwrap();
        assert!(x.grad().unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_attention_preserves_argmax_with_zero_bias() {
        let mut cfg = micro_config(Fusion::Mid);
        cfg.domain_attention = true;
        let mut model = StreamModel::new(cfg.clone(), 21).unwrap();
        let names = model.param_names().to_vec();
        for (n, t) in names.iter().zip(model.params_mut()) {
            if n.contains(".disc_") {
                // constant discriminator output ⇒ same weight for every row
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if (n.contains(".verb.") || n.contains(".noun.")) && n.ends_with("bias") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut plain = model.clone();
        plain.config.domain_attention = false;
        let b = batch(4, 2, 22);
        let g = Graph::new();
        let with = model
            .forward(&model.bind(&g), &b, &ForwardOptions::inference())
            .unwrap();
        let without = plain
            .forward(&plain.bind(&g), &b, &ForwardOptions::inference())
            .unwrap();
        let (a, c) = (with.verb_logits.value(), without.verb_logits.value());
        for r in 0..4 {
            assert_eq!(argmax(a.row(r)), argmax(c.row(r)));
            for j in 0..2 {
                assert!((a.at(r, j) - 2.0 * c.at(r, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn late_stream_logits_recover_fused_probabilities() {
        let model = StreamModel::new(micro_config(Fusion::Late), 13).unwrap();
        let g = Graph::new();
        let p = model.bind(&g);
        let out = model
            .forward(&p, &batch(3, 2, 14), &ForwardOptions::inference())
            .unwrap();
        assert_eq!(out.branches.len(), 2);
        let fused = late_fusion(&[out.branches[0].noun_logits, out.branches[1].noun_logits])
            .unwrap()
            .value();
        let logits = out.noun_logits.value();
        for r in 0..3 {
            let p = softmax_row(logits.row(r));
            for (j, pj) in p.iter().enumerate() {
                assert!((pj - fused.at(r, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut m = StreamModel::new(micro_config(Fusion::Mid), 15).unwrap();
        let flat = m.flat_params();
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        m.set_flat_params(&doubled).unwrap();
        assert_eq!(m.flat_params(), doubled);
        assert!(m.set_flat_params(&flat[1..]).is_err());
    }
}
