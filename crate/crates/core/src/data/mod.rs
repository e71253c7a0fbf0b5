//! Synthetic multi-modal, multi-domain clip features.
//!
//! Every clip has `frames` frames per modality. Frame features are drawn
//! around a class-conditional mean (sum of a verb direction and a noun
//! direction), then moved by a per-domain offset and multiplied by a
//! per-domain, per-modality norm scale. The target domain gets its own
//! offset and scales. Values are rounded to `f32` at generation time so the
//! on-disk format reproduces them exactly.

mod batches;
mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ClipBatch;
use crate::tensor::Tensor;

pub use batches::{batch_indices, cycle_zip, Batches};
pub use io::{load_dataset, save_dataset, DATASET_VERSION};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{file}: truncated, expected {expected} bytes, found {found}")]
    Truncated { file: String, expected: u64, found: u64 },
    #[error("{file}: checksum mismatch (manifest {expected:08x}, data {found:08x})")]
    Checksum { file: String, expected: u32, found: u32 },
    #[error("dataset inconsistent: {0}")]
    Consistency(String),
    #[error("labels.csv line {line}: {message}")]
    Labels { line: usize, message: String },
    #[error("{0}")]
    Contract(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    /// Multiplies the spec-wide class separation for this modality.
    #[serde(default = "default_one")]
    pub separation_scale: f64,
    /// Multiplies the spec-wide domain shift for this modality.
    #[serde(default = "default_one")]
    pub shift_scale: f64,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            separation_scale: 1.0,
            shift_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source_domains: usize,
    pub modalities: Vec<ModalitySpec>,
    pub frames: usize,
    pub verb_classes: usize,
    pub noun_classes: usize,
    /// Clips per source domain, and per target split.
    pub samples_per_domain: usize,
    /// Length of the class mean directions.
    pub class_separation: f64,
    /// Length of each domain's offset vector.
    pub shift: f64,
    /// Per modality, one factor per source domain followed by the target's.
    /// Absent modalities are unscaled.
    pub norm_scales: BTreeMap<String, Vec<f64>>,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source_domains: 3,
            modalities: vec![
                ModalitySpec::new("rgb", 16),
                ModalitySpec::new("flow", 16),
                ModalitySpec::new("audio", 16),
            ],
            frames: 4,
            verb_classes: 4,
            noun_classes: 4,
            samples_per_domain: 200,
            class_separation: 1.5,
            shift: 1.0,
            norm_scales: BTreeMap::new(),
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DataError::Spec(m));
        if self.source_domains == 0 {
            return err("source_domains must be >= 1".into());
        }
        if self.modalities.is_empty() {
            return err("modalities must not be empty".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 {
                return err(format!("modality {} has dim 0", m.name));
            }
            if m.name.is_empty()
                || !m
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return err(format!("modality name {:?} must be non-empty [A-Za-z0-9_-]", m.name));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return err(format!("duplicate modality {}", m.name));
            }
            if !(m.separation_scale >= 0.0) || !(m.shift_scale >= 0.0) {
                return err(format!("modality {} scales must be >= 0", m.name));
            }
        }
        if self.frames == 0 || self.verb_classes == 0 || self.noun_classes == 0 || self.samples_per_domain == 0 {
            return err("frames, class counts and samples_per_domain must be positive".into());
        }
        if !(self.shift >= 0.0) || !(self.class_separation >= 0.0) {
            return err("shift and class_separation must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return err(format!("label_noise must be in [0, 1), got {}", self.label_noise));
        }
        for (name, scales) in &self.norm_scales {
            if !self.modalities.iter().any(|m| &m.name == name) {
                return err(format!("norm_scales names unknown modality {name}"));
            }
            if scales.len() != self.source_domains + 1 {
                return err(format!(
                    "norm_scales.{name} needs {} factors (sources then target), got {}",
                    self.source_domains + 1,
                    scales.len()
                ));
            }
            if let Some(s) = scales.iter().find(|s| !(**s > 0.0)) {
                return err(format!("norm_scales.{name} has non-positive factor {s}"));
            }
        }
        Ok(())
    }

    /// Norm factor of `modality` in domain `domain` (`source_domains` is the target).
    pub fn norm_scale(&self, modality: &str, domain: usize) -> f64 {
        self.norm_scales.get(modality).map_or(1.0, |s| s[domain])
    }

    /// Sets the same factor for `modality` in every domain.
    pub fn with_uniform_scale(mut self, modality: &str, factor: f64) -> Self {
        self.norm_scales
            .insert(modality.to_string(), vec![factor; self.source_domains + 1]);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitKind {
    Source(usize),
    TargetTrain,
    TargetTest,
}

impl SplitKind {
    pub fn is_target(self) -> bool {
        !matches!(self, SplitKind::Source(_))
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitKind::Source(k) => write!(f, "source_{k}"),
            SplitKind::TargetTrain => f.write_str("target_train"),
            SplitKind::TargetTest => f.write_str("target_test"),
        }
    }
}

impl FromStr for SplitKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target_train" => Ok(SplitKind::TargetTrain),
            "target_test" => Ok(SplitKind::TargetTest),
            _ => s
                .strip_prefix("source_")
                .and_then(|k| k.parse().ok())
                .map(SplitKind::Source)
                .ok_or_else(|| DataError::Contract(format!("unknown split {s:?}"))),
        }
    }
}

impl Serialize for SplitKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionLabel {
    pub verb: usize,
    pub noun: usize,
}

/// Frame features of a set of clips, one `[clips·frames × dim]` matrix per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSet {
    pub frames: usize,
    pub clips: usize,
    pub features: Vec<(String, Tensor)>,
}

impl ClipSet {
    /// The selected clips, in the given order.
    pub fn gather(&self, indices: &[usize]) -> ClipBatch {
        let modalities = self
            .features
            .iter()
            .map(|(name, t)| {
                let dim = t.cols();
                let mut values = Vec::with_capacity(indices.len() * self.frames * dim);
                for &i in indices {
                    let start = i * self.frames * dim;
                    values.extend_from_slice(&t.values()[start..start + self.frames * dim]);
                }
                let m = Tensor::matrix(indices.len() * self.frames, dim, values).expect("consistent sizes");
                (name.clone(), m)
            })
            .collect();
        ClipBatch {
            clips: indices.len(),
            frames: self.frames,
            modalities,
        }
    }

    pub fn all(&self) -> ClipBatch {
        let idx: Vec<usize> = (0..self.clips).collect();
        self.gather(&idx)
    }

    /// Concatenates clip sets with identical modalities.
    pub fn concat(sets: &[&ClipSet]) -> Result<ClipSet> {
        let first = sets
            .first()
            .ok_or_else(|| DataError::Contract("nothing to concatenate".into()))?;
        let mut features = Vec::with_capacity(first.features.len());
        for (m, (name, t)) in first.features.iter().enumerate() {
            let mut values = Vec::new();
            for s in sets {
                let (n, other) = &s.features[m];
                if n != name || other.cols() != t.cols() || s.frames != first.frames {
                    return Err(DataError::Contract(format!("clip sets disagree on modality {name}")));
                }
                values.extend_from_slice(other.values());
            }
            let rows = values.len() / t.cols();
            features.push((name.clone(), Tensor::matrix(rows, t.cols(), values).expect("sizes")));
        }
        Ok(ClipSet {
            frames: first.frames,
            clips: sets.iter().map(|s| s.clips).sum(),
            features,
        })
    }
}

/// A split with labels. Reads of target labels go through a shared counter.
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    kind: SplitKind,
    clips: ClipSet,
    labels: Vec<ActionLabel>,
    target_reads: Arc<AtomicUsize>,
}

impl LabeledSplit {
    pub fn kind(&self) -> SplitKind {
        self.kind
    }

    pub fn clips(&self) -> &ClipSet {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.clips
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[ActionLabel] {
        if self.kind.is_target() {
            self.target_reads.fetch_add(1, Ordering::SeqCst);
        }
        &self.labels
    }

    /// Labels without touching the read counter; for serialization only.
    pub(crate) fn labels_unchecked(&self) -> &[ActionLabel] {
        &self.labels
    }
}

impl PartialEq for LabeledSplit {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.clips == other.clips && self.labels == other.labels
    }
}

/// Target clips available for adaptation. Carries no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSplit {
    clips: ClipSet,
}

impl UnlabeledSplit {
    pub fn clips(&self) -> &ClipSet {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.clips
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All labeled source clips pooled, with each clip's source domain index.
#[derive(Debug, Clone)]
pub struct SourcePool {
    pub clips: ClipSet,
    pub labels: Vec<ActionLabel>,
    pub domains: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FeatureDataset {
    spec: DatasetSpec,
    sources: Vec<LabeledSplit>,
    target_train: UnlabeledSplit,
    target_test: LabeledSplit,
    target_reads: Arc<AtomicUsize>,
}

impl PartialEq for FeatureDataset {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.sources == other.sources
            && self.target_train == other.target_train
            && self.target_test == other.target_test
    }
}

impl FeatureDataset {
    pub(crate) fn assemble(
        spec: DatasetSpec,
        sources: Vec<(ClipSet, Vec<ActionLabel>)>,
        target_train: ClipSet,
        target_test: (ClipSet, Vec<ActionLabel>),
    ) -> Self {
        let counter = Arc::new(AtomicUsize::new(0));
        let labeled = |kind, (clips, labels)| LabeledSplit {
            kind,
            clips,
            labels,
            target_reads: counter.clone(),
        };
        let sources = sources
            .into_iter()
            .enumerate()
            .map(|(k, s)| labeled(SplitKind::Source(k), s))
            .collect();
        let target_test = labeled(SplitKind::TargetTest, target_test);
        Self {
            spec,
            sources,
            target_train: UnlabeledSplit { clips: target_train },
            target_test,
            target_reads: counter,
        }
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn sources(&self) -> &[LabeledSplit] {
        &self.sources
    }

    pub fn target_train(&self) -> &UnlabeledSplit {
        &self.target_train
    }

    pub fn target_test(&self) -> &LabeledSplit {
        &self.target_test
    }

    /// A labeled split by kind; `TargetTrain` has no labels.
    pub fn labeled(&self, kind: SplitKind) -> Result<&LabeledSplit> {
        match kind {
            SplitKind::Source(k) => self
                .sources
                .get(k)
                .ok_or_else(|| DataError::Contract(format!("no split source_{k}"))),
            SplitKind::TargetTest => Ok(&self.target_test),
            SplitKind::TargetTrain => Err(DataError::Contract("target_train is unlabeled".into())),
        }
    }

    pub fn clip_set(&self, kind: SplitKind) -> Result<&ClipSet> {
        match kind {
            SplitKind::TargetTrain => Ok(&self.target_train.clips),
            other => Ok(&self.labeled(other)?.clips),
        }
    }

    /// Every split in file order: sources, target_train, target_test.
    pub fn split_kinds(&self) -> Vec<SplitKind> {
        let mut kinds: Vec<SplitKind> = (0..self.sources.len()).map(SplitKind::Source).collect();
        kinds.push(SplitKind::TargetTrain);
        kinds.push(SplitKind::TargetTest);
        kinds
    }

    /// Number of reads of target labels so far, across clones of this dataset.
    pub fn target_label_reads(&self) -> usize {
        self.target_reads.load(Ordering::SeqCst)
    }

    pub fn source_pool(&self) -> Result<SourcePool> {
        let sets: Vec<&ClipSet> = self.sources.iter().map(|s| &s.clips).collect();
        let clips = ClipSet::concat(&sets)?;
        let mut labels = Vec::with_capacity(clips.clips);
        let mut domains = Vec::with_capacity(clips.clips);
        for (k, s) in self.sources.iter().enumerate() {
            labels.extend_from_slice(s.labels());
            domains.extend(std::iter::repeat_n(k, s.len()));
        }
        Ok(SourcePool { clips, labels, domains })
    }

    /// Seeded mini-batches of clip indices within `split`.
    pub fn batches(&self, split: SplitKind, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches> {
        let n = self.clip_set(split)?.clips;
        Batches::new(n, batch_size, seed, epoch)
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct ModalityModel {
    dim: usize,
    verb_means: Vec<Vec<f64>>,
    noun_means: Vec<Vec<f64>>,
    /// Offset per domain, target last.
    offsets: Vec<Vec<f64>>,
    /// Norm factor per domain, target last.
    scales: Vec<f64>,
}

/// Deterministic synthetic dataset for `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let domains = spec.source_domains + 1;
    let models: Vec<ModalityModel> = spec
        .modalities
        .iter()
        .map(|m| {
            let sep = spec.class_separation * m.separation_scale;
            let mut means = |count: usize| -> Vec<Vec<f64>> {
                (0..count)
                    .map(|_| unit_direction(&mut rng, m.dim).into_iter().map(|x| x * sep).collect())
                    .collect()
            };
            let verb_means = means(spec.verb_classes);
            let noun_means = means(spec.noun_classes);
            let shift = spec.shift * m.shift_scale;
            let offsets = (0..domains)
                .map(|_| unit_direction(&mut rng, m.dim).into_iter().map(|x| x * shift).collect())
                .collect();
            ModalityModel {
                dim: m.dim,
                verb_means,
                noun_means,
                offsets,
                scales: (0..domains).map(|d| spec.norm_scale(&m.name, d)).collect(),
            }
        })
        .collect();

    let mut draw_split = |domain: usize, noisy: bool| -> (ClipSet, Vec<ActionLabel>) {
        let n = spec.samples_per_domain;
        let mut labels = Vec::with_capacity(n);
        let mut values: Vec<Vec<f64>> = models
            .iter()
            .map(|m| Vec::with_capacity(n * spec.frames * m.dim))
            .collect();
        for _ in 0..n {
            let label = ActionLabel {
                verb: rng.random_range(0..spec.verb_classes),
                noun: rng.random_range(0..spec.noun_classes),
            };
            for (m, out) in models.iter().zip(values.iter_mut()) {
                let scale = m.scales[domain];
                let offset = &m.offsets[domain];
                for _ in 0..spec.frames {
                    let (verb, noun) = (&m.verb_means[label.verb], &m.noun_means[label.noun]);
                    for ((v, n), o) in verb.iter().zip(noun).zip(offset) {
                        let noise: f64 = rng.sample(StandardNormal);
                        out.push(f64::from((scale * (v + n + noise + o)) as f32));
                    }
                }
            }
            let mut stored = label;
            if noisy && spec.label_noise > 0.0 {
                stored.verb = flip(&mut rng, stored.verb, spec.verb_classes, spec.label_noise);
                stored.noun = flip(&mut rng, stored.noun, spec.noun_classes, spec.label_noise);
            }
            labels.push(stored);
        }
        let features = spec
            .modalities
            .iter()
            .zip(values)
            .map(|(m, v)| {
                let t = Tensor::matrix(n * spec.frames, m.dim, v).expect("sizes");
                (m.name.clone(), t)
            })
            .collect();
        (
            ClipSet {
                frames: spec.frames,
                clips: n,
                features,
            },
            labels,
        )
    };

    let sources: Vec<_> = (0..spec.source_domains).map(|d| draw_split(d, true)).collect();
    let (target_train, _) = draw_split(spec.source_domains, false);
    let target_test = draw_split(spec.source_domains, false);
    Ok(FeatureDataset::assemble(
        spec.clone(),
        sources,
        target_train,
        target_test,
    ))
}

fn flip(rng: &mut ChaCha8Rng, label: usize, classes: usize, rate: f64) -> usize {
    if classes < 2 || rng.random::<f64>() >= rate {
        return label;
    }
    let other = rng.random_range(0..classes - 1);
    if other >= label {
        other + 1
    } else {
        other
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            samples_per_domain: 20,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&DatasetSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_and_values_are_f32_exact() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.sources().len(), 3);
        for kind in d.split_kinds() {
            let set = d.clip_set(kind).unwrap();
            assert_eq!(set.clips, 20);
            for (_, t) in &set.features {
                assert_eq!(t.shape(), &[80, 16]);
                assert!(t.values().iter().all(|&v| f64::from(v as f32) == v));
            }
        }
    }

    #[test]
    fn target_train_has_no_labels() {
        let d = generate(&small()).unwrap();
        assert!(d.labeled(SplitKind::TargetTrain).is_err());
        assert_eq!(d.target_label_reads(), 0);
        d.source_pool().unwrap();
        assert_eq!(d.target_label_reads(), 0);
        let _ = d.target_test().labels();
        assert_eq!(d.target_label_reads(), 1);
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec {
            source_domains: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(DatasetSpec {
            label_noise: 1.0,
            ..small()
        }
        .validate()
        .is_err());
        let mut bad = small();
        bad.norm_scales.insert("audio".into(), vec![4.0; 3]);
        assert!(bad.validate().is_err());
        let mut unknown = small();
        unknown.norm_scales.insert("depth".into(), vec![1.0; 4]);
        assert!(unknown.validate().is_err());
        assert!(small().with_uniform_scale("audio", 4.0).validate().is_ok());
    }

    #[test]
    fn label_noise_flips_to_other_classes() {
        let spec = DatasetSpec {
            label_noise: 0.5,
            ..small()
        };
        let noisy = generate(&spec).unwrap();
        let labels = noisy.sources()[0].labels();
        assert!(labels.iter().all(|l| l.verb < 4 && l.noun < 4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_ne!(flip(&mut rng, 2, 4, 0.999_999), 2);
        }
    }

    #[test]
    fn split_names_round_trip() {
        for k in [
            SplitKind::Source(0),
            SplitKind::Source(12),
            SplitKind::TargetTrain,
            SplitKind::TargetTest,
        ] {
            assert_eq!(k.to_string().parse::<SplitKind>().unwrap(), k);
        }
        assert!("source_x".parse::<SplitKind>().is_err());
    }

    #[test]
    fn gather_selects_whole_clips() {
        let d = generate(&small()).unwrap();
        let set = d.clip_set(SplitKind::Source(1)).unwrap();
        let b = set.gather(&[3, 0]);
        assert_eq!(b.clips, 2);
        let (_, rgb) = &set.features[0];
        let got = b.modality("rgb").unwrap();
        assert_eq!(got.row(0), rgb.row(12));
        assert_eq!(got.row(4), rgb.row(0));
    }
}
