//! Central finite-difference verification of analytic gradients.

mod suite;

use serde::Serialize;

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub use suite::{gradient_suite, SuiteEntry, SUITE_CHECKS};

/// Elementwise errors are divided by `max(|analytic|, |numeric|, REL_FLOOR)`,
/// so entries whose true derivative is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
    #[serde(skip)]
    pub analytic: Vec<f64>,
    #[serde(skip)]
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of the scalar `f` at `x` against
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<CheckReport>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {step}")));
    }
    let graph = Graph::new();
    let input = graph.param(x.clone());
    let out = f(input)?;
    graph.backward(out)?;
    let analytic = input
        .grad()
        .map(Tensor::into_values)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = f(g.constant(probe.clone()))?;
        let out = v.value();
        if out.numel() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.values_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.values_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        // NaN compares false, so route it through explicitly
        if rel > max_rel_err || rel.is_nan() {
            max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_index = i;
        }
        max_abs_err = max_abs_err.max(abs);
    }
    Ok(CheckReport {
        max_rel_err,
        max_abs_err,
        worst_index,
        step,
        tol,
        passed: max_rel_err <= tol,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = random(vec![3, 4], 1);
        let report = finite_diff_check(|x| Ok(x.sum()), &x, 1e-5, 1e-4).unwrap();
        assert!(report.passed);
        assert!(report.analytic.iter().all(|&g| g == 1.0));
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn matmul_gradients_both_sides() {
        let a = random(vec![3, 4], 2);
        let b = random(vec![4, 2], 3);
        let weights = random(vec![3, 2], 4);
        let wb = b.clone();
        let ww = weights.clone();
        let left = finite_diff_check(
            move |x| {
                let g = x.graph();
                x.matmul(g.constant(wb.clone()))?
                    .mul(g.constant(ww.clone()))
                    .map(|v| v.sum())
            },
            &a,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(left.passed, "{left:?}");
        let right = finite_diff_check(
            move |x| {
                let g = x.graph();
                g.constant(a.clone())
                    .matmul(x)?
                    .mul(g.constant(weights.clone()))
                    .map(|v| v.sum())
            },
            &b,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(right.passed, "{right:?}");
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let x = random(vec![2, 5], 5);
        let w = random(vec![2, 5], 6);
        let w2 = w.clone();
        let r = finite_diff_check(
            move |x| x.softmax().mul(x.graph().constant(w.clone())).map(|v| v.sum()),
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = finite_diff_check(
            move |x| x.log_softmax().mul(x.graph().constant(w2.clone())).map(|v| v.sum()),
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn l2_norm_rows_gradient() {
        let x = random(vec![4, 8], 7);
        let w = random(vec![4], 8);
        let r = finite_diff_check(
            move |x| x.l2_norm_rows()?.mul(x.graph().constant(w.clone())).map(|v| v.sum()),
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn remaining_ops_gradients() {
        let x = random(vec![3, 4], 9);
        let bias = random(vec![4], 10);
        let r = finite_diff_check(
            move |x| {
                let g = x.graph();
                let b = g.constant(bias.clone());
                let pos = x.exp().add_scalar(0.5);
                let a = x.add_bias(b)?.relu().scalar_mul(1.7);
                let c = pos.log()?.div(pos.add_scalar(1.0))?;
                let d = Var::concat(&[a, c], 1)?.select_rows(&[2, 0, 2])?;
                let e = d.gather(&[1, 7, 3])?;
                let f = d.sum_rows()?.clamp_min(-100.0).sub(e)?.square();
                let h = Var::concat(&[f, x.reshape(vec![12])?], 0)?;
                Ok(h.mean())
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn reversed_gradient_fails_plain_check() {
        let x = random(vec![5], 11);
        let r = finite_diff_check(|x| Ok(x.grad_reverse(1.0).square().sum()), &x, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = random(vec![2], 12);
        assert!(finite_diff_check(|x| Ok(x.sum()), &x, 0.0, 1e-4).is_err());
    }
}
