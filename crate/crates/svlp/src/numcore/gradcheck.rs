//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numcore::store::ParameterStore;
use crate::numcore::tensor::Real;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences at the
/// sampled flat indices. The relative error at index i is
/// `|g_a - g_fd| / max(1e-12, |g_a| + |g_fd|)`.
///
/// `loss_fn` must be deterministic; this is verified by evaluating the
/// unperturbed loss twice and requiring bitwise agreement. An empty sample
/// set vacuously reports error 0.
pub fn finite_diff_check<T, F>(
    store: &mut ParameterStore<T>,
    indices: &[usize],
    eps: f64,
    analytic: &[f64],
    mut loss_fn: F,
) -> Result<FiniteDiffReport>
where
    T: Real,
    F: FnMut(&ParameterStore<T>) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Numerical(format!("eps must be positive, got {eps}")));
    }
    let base_a = loss_fn(store)?;
    let base_b = loss_fn(store)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::NonDeterministicLoss);
    }

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
    };
    for &i in indices {
        let saved = store.get_flat(i)?;
        store.set_flat(i, saved + T::from_f64(eps))?;
        let plus = loss_fn(store)?;
        store.set_flat(i, saved - T::from_f64(eps))?;
        let minus = loss_fn(store)?;
        store.set_flat(i, saved)?;

        let fd = (plus - minus) / (2.0 * eps);
        let ga = analytic[i];
        let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-12);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tape::Tape;
    use crate::numcore::tensor::Tensor;

    #[test]
    fn quadratic_loss_checks_to_roundoff() {
        let mut store = ParameterStore::<f64>::new();
        store
            .register(
                "theta",
                Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 0.25]).unwrap(),
                true,
            )
            .unwrap();
        let loss_fn = |s: &ParameterStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let th = tape.param(s, "theta")?;
            let sq = tape.mul(th, th)?;
            let total = tape.sum(sq)?;
            let half = tape.scale(total, 0.5)?;
            tape.value(half).scalar_value()
        };
        // analytic gradient of 0.5 * sum(theta^2) is theta itself
        let analytic: Vec<f64> = store.snapshot_flat();
        let indices: Vec<usize> = (0..4).collect();
        let report =
            finite_diff_check(&mut store, &indices, 1e-4, &analytic, loss_fn).unwrap();
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn empty_index_subset_is_vacuous() {
        let mut store = ParameterStore::<f64>::new();
        store
            .register("theta", Tensor::new(vec![1], vec![1.0]).unwrap(), true)
            .unwrap();
        let report =
            finite_diff_check(&mut store, &[], 1e-4, &[0.0], |_| Ok(1.0)).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.checked, 0);
        assert!(report.worst_index.is_none());
    }

    #[test]
    fn non_deterministic_loss_is_detected() {
        let mut store = ParameterStore::<f64>::new();
        store
            .register("theta", Tensor::new(vec![1], vec![1.0]).unwrap(), true)
            .unwrap();
        let mut counter = 0.0;
        let result = finite_diff_check(&mut store, &[0], 1e-4, &[0.0], move |_| {
            counter += 1.0;
            Ok(counter)
        });
        assert!(matches!(result, Err(Error::NonDeterministicLoss)));
    }
}
