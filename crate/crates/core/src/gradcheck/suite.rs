//! Finite-difference checks of every training objective and of a whole
//! micro model, on seeded random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{finite_diff_check, CheckReport};
use crate::losses::{
    attentive_entropy_loss, classification_loss, domain_adversarial_loss, mec_loss, rna_loss, rna_uda_loss, thna_loss,
    DomainTag, LossError, ModalityBatch,
};
use crate::models::{
    Adversary, ClipBatch, ForwardOptions, Fusion, ModalityInput, ModelError, StreamConfig, StreamModel,
};
use crate::tensor::{Result, Tensor, TensorError, Var};

pub const SUITE_CHECKS: [&str; 10] = [
    "rna",
    "rna_three_modalities",
    "rna_uda",
    "thna",
    "mec",
    "cross_entropy",
    "adversarial",
    "attentive_entropy",
    "end_to_end_mid",
    "end_to_end_late",
];

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub check: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: CheckReport,
}

fn loss_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        LossError::Contract(m) => TensorError::Invalid(m),
    }
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).expect("sizes")
}

/// Row blocks of `x`, each `rows` tall.
fn blocks<'g>(x: Var<'g>, count: usize, rows: usize) -> Result<Vec<Var<'g>>> {
    (0..count).map(|i| x.slice_rows(i * rows, (i + 1) * rows)).collect()
}

fn micro(fusion: Fusion) -> StreamConfig {
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
        trm_scales: vec![2, 3],
        verb_classes: 3,
        noun_classes: 2,
        domain_count: 2,
        fusion,
        discriminator_hidden: 3,
        domain_attention: false,
        subset_seed: 0,
    }
}

/// Classification, both norm terms, all three domain levels and consensus of
/// one stream, differentiated with respect to every parameter at once.
/// Discriminators run without gradient reversal and without attention so
/// the analytic gradient is the true gradient of the printed loss.
fn end_to_end(fusion: Fusion, seed: u64, step: f64, tol: f64) -> Result<CheckReport> {
    let mut model = StreamModel::new(micro(fusion), seed).map_err(model_err)?;
    // Positive extractor biases keep every modality's features away from the
    // all-dead ReLU corner, where the norm ratio explodes and central
    // differences lose all precision.
    let names = model.param_names().to_vec();
    for (name, p) in names.iter().zip(model.params_mut()) {
        if name.starts_with("extractor.") && name.ends_with(".bias") {
            p.values_mut().iter_mut().for_each(|b| *b = b.abs() + 0.5);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let (clips, frames) = (4, 3);
    let batch = ClipBatch {
        clips,
        frames,
        modalities: vec![
            ("rgb".into(), random(&mut rng, clips * frames, 3, -1.0, 1.0)),
            ("audio".into(), random(&mut rng, clips * frames, 2, -2.0, 2.0)),
        ],
    };
    let verbs: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
    let nouns: Vec<usize> = (0..2).map(|_| rng.random_range(0..2)).collect();
    let domains = [0, 0, 1, 1];
    let frame_domains: Vec<usize> = domains.iter().flat_map(|&d| [d; 3]).collect();
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let flat = model.flat_params();
    let x = Tensor::vector(flat).expect("flat params");

    let fixture = EndToEnd {
        model,
        batch,
        shapes,
        verbs,
        nouns,
        domains,
        frame_domains,
    };
    finite_diff_check(move |x| fixture.loss(x), &x, step, tol)
}

struct EndToEnd {
    model: StreamModel,
    batch: ClipBatch,
    shapes: Vec<Vec<usize>>,
    verbs: Vec<usize>,
    nouns: Vec<usize>,
    domains: [usize; 4],
    frame_domains: Vec<usize>,
}

impl EndToEnd {
    fn loss<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let column = x.reshape(vec![x.shape().iter().product(), 1])?;
        let mut offset = 0;
        let mut p = Vec::with_capacity(self.shapes.len());
        for shape in &self.shapes {
            let size: usize = shape.iter().product();
            p.push(column.slice_rows(offset, offset + size)?.reshape(shape.clone())?);
            offset += size;
        }
        let opts = ForwardOptions {
            adversary: Adversary::Plain,
            dropout: None,
        };
        let out = self.model.forward(&p, &self.batch, &opts).map_err(model_err)?;
        let mut total = classification_loss(out.verb_logits.slice_rows(0, 2)?, &self.verbs)
            .and_then(|v| Ok(v.add(classification_loss(out.noun_logits.slice_rows(0, 2)?, &self.nouns)?)?))
            .map_err(loss_err)?;
        let split = |start: usize, end: usize, tag: DomainTag| -> Result<Vec<ModalityBatch<'g>>> {
            ["rgb", "audio"]
                .iter()
                .zip(&out.modality_features)
                .map(|(m, f)| Ok(ModalityBatch::new(*m, f.slice_rows(start, end)?, tag)))
                .collect()
        };
        let rna =
            rna_uda_loss(&split(0, 6, DomainTag::Source(0))?, &split(6, 12, DomainTag::Target)?).map_err(loss_err)?;
        total = total.add(rna)?;
        let mut relations = Vec::new();
        for b in &out.branches {
            let d = b.domain.as_ref().expect("plain adversary yields domain logits");
            let frame = domain_adversarial_loss(d.frame, &self.frame_domains).map_err(loss_err)?;
            total = total.add(frame.scalar_mul(0.75))?;
            for r in &d.relations {
                let rel = domain_adversarial_loss(*r, &self.domains).map_err(loss_err)?;
                total = total.add(rel.scalar_mul(0.375))?;
            }
            let video = domain_adversarial_loss(d.video, &self.domains).map_err(loss_err)?;
            total = total.add(video.scalar_mul(0.5))?;
            relations.extend(b.relations.iter().copied());
        }
        total = total.add(thna_loss(&[relations], 1.0).map_err(loss_err)?.scalar_mul(0.1))?;
        let target = out.verb_logits.slice_rows(2, 4)?;
        total = total.add(mec_loss(&[target]).map_err(loss_err)?)?;
        Ok(total)
    }
}

fn run(check: &str, seed: u64, step: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match check {
        "rna" | "rna_three_modalities" => {
            let m = if check == "rna" { 2 } else { 3 };
            let x = random(&mut rng, 5 * m, 4, -2.0, 2.0);
            finite_diff_check(
                move |x| {
                    let batches: Vec<ModalityBatch<'_>> = blocks(x, m, 5)?
                        .into_iter()
                        .enumerate()
                        .map(|(i, f)| ModalityBatch::new(format!("m{i}"), f, DomainTag::Source(0)))
                        .collect();
                    rna_loss(&batches).map_err(loss_err)
                },
                &x,
                step,
                tol,
            )
        }
        "rna_uda" => {
            let x = random(&mut rng, 4 * 5, 4, -2.0, 2.0);
            finite_diff_check(
                |x| {
                    let b = blocks(x, 4, 5)?;
                    let s = [
                        ModalityBatch::new("rgb", b[0], DomainTag::Source(0)),
                        ModalityBatch::new("audio", b[1], DomainTag::Source(1)),
                    ];
                    let t = [
                        ModalityBatch::new("rgb", b[2], DomainTag::Target),
                        ModalityBatch::new("audio", b[3], DomainTag::Target),
                    ];
                    rna_uda_loss(&s, &t).map_err(loss_err)
                },
                &x,
                step,
                tol,
            )
        }
        "thna" => {
            let x = random(&mut rng, 2 * 3 * 4, 5, -1.0, 1.0);
            finite_diff_check(
                |x| {
                    let b = blocks(x, 6, 4)?;
                    thna_loss(&[b[..3].to_vec(), b[3..].to_vec()], 1.5).map_err(loss_err)
                },
                &x,
                step,
                tol,
            )
        }
        "mec" => {
            let x = random(&mut rng, 2 * 6, 4, -3.0, 3.0);
            finite_diff_check(|x| mec_loss(&blocks(x, 2, 6)?).map_err(loss_err), &x, step, tol)
        }
        "cross_entropy" => {
            let x = random(&mut rng, 6, 5, -3.0, 3.0);
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
            finite_diff_check(
                move |x| classification_loss(x, &labels).map_err(loss_err),
                &x,
                step,
                tol,
            )
        }
        "adversarial" => {
            // Features through a fixed two-layer discriminator into domain cross-entropy.
            let x = random(&mut rng, 6, 4, -1.0, 1.0);
            let w1 = random(&mut rng, 4, 5, -1.0, 1.0);
            let b1 = random(&mut rng, 1, 5, -0.5, 0.5);
            let w2 = random(&mut rng, 5, 3, -1.0, 1.0);
            let domains: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            finite_diff_check(
                move |x| {
                    let g = x.graph();
                    let bias = g.constant(b1.clone()).reshape(vec![5])?;
                    let h = x.matmul(g.constant(w1.clone()))?.add_bias(bias)?.relu();
                    let logits = h.matmul(g.constant(w2.clone()))?;
                    domain_adversarial_loss(logits, &domains).map_err(loss_err)
                },
                &x,
                step,
                tol,
            )
        }
        "attentive_entropy" => {
            let x = random(&mut rng, 5, 4, -2.0, 2.0);
            let domain = random(&mut rng, 5, 3, -2.0, 2.0);
            finite_diff_check(
                move |x| {
                    let d = x.graph().constant(domain.clone());
                    attentive_entropy_loss(x, d).map_err(loss_err)
                },
                &x,
                step,
                tol,
            )
        }
        "end_to_end_mid" => end_to_end(Fusion::Mid, seed, step, tol),
        "end_to_end_late" => end_to_end(Fusion::Late, seed, step, tol),
        other => Err(TensorError::Invalid(format!("unknown check {other}"))),
    }
}

/// Every check in [`SUITE_CHECKS`] for each seed in `seeds`.
pub fn gradient_suite(seeds: &[u64], step: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(seeds.len() * SUITE_CHECKS.len());
    for check in SUITE_CHECKS {
        for &seed in seeds {
            out.push(SuiteEntry {
                check: check.to_string(),
                seed,
                report: run(check, seed, step, tol)?,
            });
        }
    }
    Ok(out)
}
