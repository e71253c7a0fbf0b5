//! Loss values against hand-computed oracles and invariance properties.

use normalign::losses::{
    attentive_entropy_loss, classification_loss, mec_loss, rna_loss, rna_uda_loss, thna_loss, total_uda_loss,
    DomainTag, LossParts, LossWeights, ModalityBatch,
};
use normalign::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn mean_row_norm(rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows.len() as f64
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row.iter().map(|x| x - m - z.ln()).collect()
}

fn rna_of(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let g = Graph::new();
    let batches = [
        ModalityBatch::new("rgb", g.constant(matrix(a)), DomainTag::Source(0)),
        ModalityBatch::new("audio", g.constant(matrix(b)), DomainTag::Source(0)),
    ];
    rna_loss(&batches).unwrap().item()
}

#[test]
fn rna_matches_scalar_oracle() {
    let a = vec![vec![3.0, 4.0, 0.0], vec![1.0, -2.0, 2.0], vec![0.0, 0.5, 0.0]];
    let b = vec![vec![1.0, 1.0, 1.0], vec![-2.0, 0.0, 0.0], vec![0.3, 0.4, 0.0]];
    let expected = (mean_row_norm(&a) / mean_row_norm(&b) - 1.0).powi(2);
    assert!((rna_of(&a, &b) - expected).abs() < 1e-12);
}

#[test]
fn rna_is_one_at_norm_ratio_two() {
    let a = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
    let b = vec![vec![0.6, 0.8], vec![-1.0, 0.0]];
    assert!((rna_of(&a, &b) - 1.0).abs() < 1e-10);
}

#[test]
fn rna_uda_adds_the_target_term() {
    let g = Graph::new();
    let s = [vec![vec![2.0, 0.0]], vec![vec![1.0, 0.0]]];
    let t = [vec![vec![0.0, 3.0]], vec![vec![0.0, 1.0]]];
    let batch = |rows: &Vec<Vec<f64>>, name: &str, d| ModalityBatch::new(name, g.constant(matrix(rows)), d);
    let source = [
        batch(&s[0], "rgb", DomainTag::Source(0)),
        batch(&s[1], "audio", DomainTag::Source(0)),
    ];
    let target = [
        batch(&t[0], "rgb", DomainTag::Target),
        batch(&t[1], "audio", DomainTag::Target),
    ];
    let v = rna_uda_loss(&source, &target).unwrap().item();
    assert!((v - (1.0 + 4.0)).abs() < 1e-10);
}

#[test]
fn mec_is_log_c_for_uniform_logits() {
    let g = Graph::new();
    for c in [2usize, 3, 7] {
        let z = Tensor::zeros(vec![5, c]).unwrap();
        let v = mec_loss(&[g.constant(z.clone()), g.constant(z)]).unwrap().item();
        assert!((v - (c as f64).ln()).abs() < 1e-12, "C={c}: {v}");
    }
}

#[test]
fn mec_matches_brute_force() {
    // b = 2 streams, m = 4 samples, C = 3 classes.
    let s0 = vec![
        vec![0.2, -1.0, 0.5],
        vec![1.5, 1.4, -0.3],
        vec![0.0, 0.0, 0.1],
        vec![-2.0, 3.0, 0.7],
    ];
    let s1 = vec![
        vec![1.0, 0.0, -0.5],
        vec![-0.4, 2.2, 0.9],
        vec![0.3, -0.3, 0.0],
        vec![0.5, 0.6, 0.4],
    ];
    let mut expected = 0.0;
    for i in 0..4 {
        let (a, b) = (log_softmax(&s0[i]), log_softmax(&s1[i]));
        let best = (0..3).map(|y| a[y] + b[y]).fold(f64::MIN, f64::max);
        expected += -best / 2.0;
    }
    expected /= 4.0;
    let g = Graph::new();
    let v = mec_loss(&[g.constant(matrix(&s0)), g.constant(matrix(&s1))])
        .unwrap()
        .item();
    assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");
}

#[test]
fn thna_vanishes_on_the_radius() {
    let g = Graph::new();
    let r = 5.0;
    let on = g.constant(matrix(&[vec![3.0, 4.0], vec![0.0, 5.0], vec![-5.0, 0.0]]));
    let v = thna_loss(&[vec![on, on]], r).unwrap().item();
    assert!(v < 1e-20, "{v}");
    let off = g.constant(matrix(&[vec![6.0, 8.0]]));
    let v = thna_loss(&[vec![on], vec![off]], r).unwrap().item();
    assert!((v - 25.0).abs() < 1e-9);
}

#[test]
fn classification_matches_negative_log_likelihood() {
    let logits = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]];
    let labels = [1usize, 0];
    let expected = -(log_softmax(&logits[0])[1] + log_softmax(&logits[1])[0]) / 2.0;
    let g = Graph::new();
    let v = classification_loss(g.constant(matrix(&logits)), &labels)
        .unwrap()
        .item();
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn attentive_entropy_matches_oracle() {
    let class = vec![vec![0.0, 1.0, 2.0], vec![0.0, 0.0, 0.0]];
    let domain = vec![vec![0.0, 0.0], vec![4.0, -4.0]];
    let entropy = |row: &[f64]| -> f64 { log_softmax(row).iter().map(|l| -l.exp() * l).sum() };
    let expected = ((1.0 + entropy(&domain[0]) / 2f64.ln()) * entropy(&class[0])
        + (1.0 + entropy(&domain[1]) / 2f64.ln()) * entropy(&class[1]))
        / 2.0;
    let g = Graph::new();
    let v = attentive_entropy_loss(g.constant(matrix(&class)), g.constant(matrix(&domain)))
        .unwrap()
        .item();
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn total_is_the_weighted_sum() {
    let g = Graph::new();
    let mut parts = LossParts::new(g.scalar(1.0));
    parts.rna = Some(g.scalar(2.0));
    parts.adversarial = [Some(g.scalar(3.0)), None, Some(g.scalar(5.0))];
    parts.attentive_entropy = Some(g.scalar(7.0));
    parts.thna = Some(g.scalar(11.0));
    parts.mec = Some(g.scalar(13.0));
    let w = LossWeights::default();
    let expected = 1.0
        + w.lambda_rna * 2.0
        + w.beta_levels[0] * 3.0
        + w.beta_levels[2] * 5.0
        + w.gamma_attentive * 7.0
        + w.lambda_thna * 11.0
        + w.lambda_mec * 13.0;
    assert!((total_uda_loss(&parts, &w).unwrap().item() - expected).abs() < 1e-12);
    assert_eq!(total_uda_loss(&parts, &LossWeights::zeros()).unwrap().item(), 1.0);
}

fn rows_strategy(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
}

fn logits_strategy(m: usize, c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-4.0f64..4.0, c), m)
}

proptest! {
    #[test]
    fn rna_is_scale_invariant(a in rows_strategy(4, 3), b in rows_strategy(4, 3), k in 0.1f64..10.0) {
        prop_assume!(mean_row_norm(&a) > 0.1 && mean_row_norm(&b) > 0.1);
        let scaled = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().map(|x| x * k).collect()).collect::<Vec<Vec<f64>>>();
        let base = rna_of(&a, &b);
        let moved = rna_of(&scaled(&a), &scaled(&b));
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn thna_ignores_row_and_stream_order(
        a in rows_strategy(5, 3),
        b in rows_strategy(5, 3),
        shift in 0usize..5,
        r in 0.5f64..20.0,
    ) {
        let g = Graph::new();
        let rotated: Vec<Vec<f64>> = (0..5).map(|i| a[(i + shift) % 5].clone()).collect();
        let va = g.constant(matrix(&a));
        let vr = g.constant(matrix(&rotated));
        let vb = g.constant(matrix(&b));
        let x = thna_loss(&[vec![va], vec![vb]], r).unwrap().item();
        let y = thna_loss(&[vec![vb], vec![vr]], r).unwrap().item();
        prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
    }

    #[test]
    fn mec_ignores_class_order(s0 in logits_strategy(3, 4), s1 in logits_strategy(3, 4), perm in Just([2usize, 0, 3, 1])) {
        let g = Graph::new();
        let permute = |rows: &[Vec<f64>]| rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect::<Vec<Vec<f64>>>();
        let x = mec_loss(&[g.constant(matrix(&s0)), g.constant(matrix(&s1))]).unwrap().item();
        let y = mec_loss(&[g.constant(matrix(&permute(&s0))), g.constant(matrix(&permute(&s1)))]).unwrap().item();
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn single_stream_mec_is_bounded_by_log_c(s in logits_strategy(6, 5)) {
        let g = Graph::new();
        let v = mec_loss(&[g.constant(matrix(&s))]).unwrap().item();
        prop_assert!(v >= 0.0 && v <= 5f64.ln() + 1e-12);
    }

    #[test]
    fn rna_is_nonnegative_and_zero_on_equal_norms(a in rows_strategy(3, 4)) {
        prop_assume!(mean_row_norm(&a) > 0.1);
        let flipped: Vec<Vec<f64>> = a.iter().map(|r| r.iter().rev().map(|x| -x).collect()).collect();
        prop_assert!(rna_of(&a, &flipped).abs() < 1e-20);
    }
}
