use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::data::DatasetSpec;
use crate::losses::LossWeights;
use crate::models::{Fusion, ModalityInput, StreamConfig};

/// Which optional loss terms take part in training. Classification is always on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermMask {
    /// Norm alignment across modalities on source clips.
    pub rna: bool,
    /// Adds the same alignment on unlabeled target clips.
    pub rna_target: bool,
    /// Frame, relation and video domain discriminators behind gradient reversal,
    /// plus domain attention on relation features.
    pub adversarial: bool,
    pub attentive_entropy: bool,
    pub thna: bool,
    pub mec: bool,
}

impl TermMask {
    pub const NONE: TermMask = TermMask {
        rna: false,
        rna_target: false,
        adversarial: false,
        attentive_entropy: false,
        thna: false,
        mec: false,
    };

    pub const ALL: TermMask = TermMask {
        rna: true,
        rna_target: true,
        adversarial: true,
        attentive_entropy: true,
        thna: true,
        mec: true,
    };

    /// Whether any active term consumes target clips.
    pub fn uses_target(&self) -> bool {
        self.rna_target || self.adversarial || self.attentive_entropy || self.thna || self.mec
    }

    /// Drops terms whose weight is zero, so they are neither computed nor reported.
    pub fn weighted(mut self, w: &LossWeights) -> TermMask {
        self.rna &= w.lambda_rna > 0.0;
        self.rna_target &= self.rna;
        self.adversarial &= w.beta_levels.iter().any(|b| *b > 0.0);
        self.attentive_entropy &= w.gamma_attentive > 0.0 && self.adversarial;
        self.thna &= w.lambda_thna > 0.0;
        self.mec &= w.lambda_mec > 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Classification on the pooled sources.
    #[default]
    SourceOnly,
    /// Classification plus norm alignment on the sources; target data is never read.
    DgRna,
    /// Every term, using unlabeled target clips.
    UdaFull,
    Custom(TermMask),
}

impl Mode {
    pub fn mask(&self) -> TermMask {
        match self {
            Mode::SourceOnly => TermMask::NONE,
            Mode::DgRna => TermMask {
                rna: true,
                ..TermMask::NONE
            },
            Mode::UdaFull => TermMask::ALL,
            Mode::Custom(m) => *m,
        }
    }

    pub fn parse(name: &str) -> Option<Mode> {
        match name {
            "source_only" => Some(Mode::SourceOnly),
            "dg_rna" => Some(Mode::DgRna),
            "uda_full" => Some(Mode::UdaFull),
            _ => None,
        }
    }
}

/// Architecture of one backbone stream; data-dependent sizes come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub fusion: Fusion,
    /// Modalities this stream reads; all of the dataset's when absent.
    pub modalities: Option<Vec<String>>,
    pub extractor_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub relation_dim: usize,
    pub trm_scales: Vec<usize>,
    pub discriminator_hidden: usize,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            fusion: Fusion::Mid,
            modalities: None,
            extractor_hidden: Vec::new(),
            embed_dim: 32,
            relation_dim: 32,
            trm_scales: vec![2, 3, 4],
            discriminator_hidden: 32,
        }
    }
}

impl StreamSpec {
    pub fn resolve(&self, data: &DatasetSpec, domain_attention: bool, subset_seed: u64) -> Result<StreamConfig> {
        let modalities = match &self.modalities {
            None => data
                .modalities
                .iter()
                .map(|m| ModalityInput {
                    name: m.name.clone(),
                    input_dim: m.dim,
                })
                .collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    data.modalities
                        .iter()
                        .find(|m| &m.name == n)
                        .map(|m| ModalityInput {
                            name: m.name.clone(),
                            input_dim: m.dim,
                        })
                        .ok_or_else(|| TrainError::Config(format!("stream modality {n} is not in the dataset")))
                })
                .collect::<Result<_>>()?,
        };
        let config = StreamConfig {
            modalities,
            extractor_hidden: self.extractor_hidden.clone(),
            embed_dim: self.embed_dim,
            relation_dim: self.relation_dim,
            trm_scales: self.trm_scales.clone(),
            verb_classes: data.verb_classes,
            noun_classes: data.noun_classes,
            domain_count: data.source_domains + 1,
            fusion: self.fusion,
            discriminator_hidden: self.discriminator_hidden,
            domain_attention,
            subset_seed,
        };
        config.validate()?;
        config.validate_frames(data.frames)?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// The rate is multiplied by `lr_decay_factor` after each listed epoch.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weights: LossWeights,
    pub streams: Vec<StreamSpec>,
    pub seed: u64,
    /// Inverted dropout on extractor outputs during training; 0 disables it.
    pub dropout: f64,
    /// Apply the hard norm term even with a single stream.
    pub thna_single_stream: bool,
    /// Skip optimization and report only the initial evaluation.
    pub eval_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SourceOnly,
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.03,
            momentum: 0.9,
            lr_decay_epochs: vec![30, 60],
            lr_decay_factor: 0.1,
            weights: LossWeights::default(),
            streams: vec![StreamSpec::default()],
            seed: 0,
            dropout: 0.0,
            thna_single_stream: false,
            eval_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be >= 1 (use eval_only to skip training)".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor > 0.0) || self.lr_decay_factor > 1.0 {
            return err(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.streams.is_empty() {
            return err("at least one stream is required".into());
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }

    /// The mode's mask with zero-weight terms removed, and the hard norm and
    /// consensus terms removed when there are too few streams.
    pub fn active_terms(&self) -> TermMask {
        let mut m = self.mode.mask().weighted(&self.weights);
        let multi = self.streams.len() >= 2;
        m.thna &= multi || self.thna_single_stream;
        m.mec &= multi;
        m
    }
}
