//! End-to-end training behavior on small synthetic problems.

use normalign::data::{generate, DatasetSpec, FeatureDataset, ModalitySpec};
use normalign::losses::LossWeights;
use normalign::models::{read_checkpoint, write_checkpoint};
use normalign::trainer::{
    build_streams, evaluate, read_report_jsonl, train, write_report, Mode, StreamSpec, TermMask, TrainConfig,
    TrainError,
};

fn spec(audio_scale: f64) -> DatasetSpec {
    DatasetSpec {
        source_domains: 2,
        modalities: vec![ModalitySpec::new("rgb", 6), ModalitySpec::new("audio", 6)],
        frames: 3,
        verb_classes: 3,
        noun_classes: 3,
        samples_per_domain: 48,
        seed: 21,
        ..DatasetSpec::default()
    }
    .with_uniform_scale("audio", audio_scale)
}

fn small_stream() -> StreamSpec {
    StreamSpec {
        embed_dim: 8,
        relation_dim: 8,
        trm_scales: vec![2, 3],
        discriminator_hidden: 8,
        ..StreamSpec::default()
    }
}

fn config(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        batch_size: 32,
        streams: vec![small_stream()],
        seed: 3,
        ..TrainConfig::default()
    }
}

fn two_streams(mut c: TrainConfig) -> TrainConfig {
    c.streams = vec![
        small_stream(),
        StreamSpec {
            fusion: normalign::models::Fusion::Late,
            ..small_stream()
        },
    ];
    c
}

fn data(audio_scale: f64) -> FeatureDataset {
    generate(&spec(audio_scale)).unwrap()
}

#[test]
fn same_seed_reproduces_the_run_bitwise() {
    let d = data(1.0);
    let c = two_streams(config(Mode::UdaFull, 2));
    let a = train(&c, &d).unwrap();
    let b = train(&c, &d).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(
        write_checkpoint(&a.streams).unwrap(),
        write_checkpoint(&b.streams).unwrap()
    );
    let other = train(&TrainConfig { seed: 4, ..c }, &d).unwrap();
    assert_ne!(a.streams, other.streams);
}

#[test]
fn eval_only_reports_the_initial_model() {
    let d = data(1.0);
    let c = TrainConfig {
        eval_only: true,
        ..config(Mode::DgRna, 5)
    };
    let out = train(&c, &d).unwrap();
    assert_eq!(out.report.epochs.len(), 1);
    assert_eq!(out.report.last().epoch, 0);
    assert!(out.report.last().losses.is_empty());
    assert_eq!(out.streams, build_streams(&c, &d).unwrap());
}

#[test]
fn empty_and_zero_weight_masks_match_source_only() {
    let d = data(2.0);
    let base = train(&config(Mode::SourceOnly, 2), &d).unwrap();
    let none = train(&config(Mode::Custom(TermMask::NONE), 2), &d).unwrap();
    let zero = train(
        &TrainConfig {
            weights: LossWeights::zeros(),
            ..config(Mode::UdaFull, 2)
        },
        &d,
    )
    .unwrap();
    for other in [&none, &zero] {
        assert_eq!(other.streams, base.streams);
        assert_eq!(other.report.epochs, base.report.epochs);
        assert_eq!(other.report.active_terms, TermMask::NONE);
    }
}

#[test]
fn no_mode_reads_target_labels_while_optimizing() {
    let d = data(2.0);
    let masks = [
        Mode::SourceOnly,
        Mode::DgRna,
        Mode::UdaFull,
        Mode::Custom(TermMask::ALL),
    ];
    for mode in masks {
        let c = TrainConfig {
            thna_single_stream: true,
            ..config(mode, 1)
        };
        let out = train(&c, &d).unwrap();
        assert_eq!(out.report.target_label_reads, 0, "{mode:?}");
    }
    let out = train(&two_streams(config(Mode::Custom(TermMask::ALL), 1)), &d).unwrap();
    assert_eq!(out.report.target_label_reads, 0);
    // Evaluation does read them, outside the optimization window.
    assert!(d.target_label_reads() > 0);
}

#[test]
fn norm_alignment_closes_a_scale_gap() {
    let d = data(4.0);
    let c = TrainConfig {
        epochs: 10,
        ..config(Mode::DgRna, 10)
    };
    let out = train(&c, &d).unwrap();
    let (first, last) = (out.report.epochs[0].norm_ratio, out.report.last().norm_ratio);
    assert!(first > 2.5, "{first}");
    assert!(last < 1.3, "{first} -> {last}");
    let plain = train(&config(Mode::SourceOnly, 10), &d).unwrap();
    assert!(plain.report.last().norm_ratio > last);
}

#[test]
fn report_records_are_consistent() {
    let d = data(1.0);
    let c = two_streams(config(Mode::UdaFull, 3));
    let out = train(&c, &d).unwrap();
    let terms = out.report.active_terms;
    assert!(terms.rna && terms.adversarial && terms.thna && terms.mec);
    for (i, e) in out.report.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i);
        let m = e.metrics;
        assert!(m.action_top1 <= m.verb_top1.min(m.noun_top1));
        assert!(m.verb_top5 >= m.verb_top1 && m.noun_top5 >= m.noun_top1 && m.action_top5 >= m.action_top1);
        assert_eq!(e.norms.len(), 2);
        if i > 0 {
            for key in [
                "cls",
                "rna",
                "adv_frame",
                "adv_relation",
                "adv_video",
                "attentive_entropy",
                "thna",
                "mec",
                "total",
            ] {
                assert!(e.losses[key].is_finite(), "{key}");
            }
            assert!(e.grl_lambda > 0.0 && e.grl_lambda < 1.0);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    write_report(&out.report, dir.path()).unwrap();
    assert_eq!(
        read_report_jsonl(dir.path().join("report.jsonl")).unwrap(),
        out.report.epochs
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 3);
    assert_eq!(summary["target_label_reads"], 0);
}

#[test]
fn checkpoint_reproduces_final_metrics() {
    let d = data(1.0);
    let out = train(&two_streams(config(Mode::DgRna, 2)), &d).unwrap();
    let restored = read_checkpoint(&write_checkpoint(&out.streams).unwrap()).unwrap();
    assert_eq!(evaluate(&restored, d.target_test()).unwrap(), out.report.last().metrics);
}

#[test]
fn divergence_aborts_with_the_offending_term() {
    let d = data(1.0);
    let c = TrainConfig {
        learning_rate: 1e200,
        momentum: 0.0,
        ..config(Mode::SourceOnly, 3)
    };
    match train(&c, &d) {
        Err(TrainError::NonFinite { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected a numerical abort, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let d = data(1.0);
    assert!(matches!(
        train(&config(Mode::SourceOnly, 0), &d),
        Err(TrainError::Config(_))
    ));
    let bad_modality = TrainConfig {
        streams: vec![StreamSpec {
            modalities: Some(vec!["depth".into()]),
            ..small_stream()
        }],
        ..config(Mode::SourceOnly, 1)
    };
    assert!(train(&bad_modality, &d).is_err());
}
