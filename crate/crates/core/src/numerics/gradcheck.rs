//! Finite-difference gradient checker.

use super::ParamStore;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Analytic gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Checks tape gradients of a scalar-valued function against central
/// differences over the named parameter subset.
///
/// `f` evaluates the function at the store's current values and returns the
/// loss together with its analytic gradients. Every coordinate of every
/// named parameter is perturbed by ±eps; the comparison uses relative error,
/// falling back to absolute error where the central-difference estimate is
/// below 1e-8. Returns the maximum error across coordinates.
pub fn grad_check<F>(
    store: &mut ParamStore,
    names: &[&str],
    eps: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, GradMap)>,
{
    assert!(
        (1e-6..=1e-3).contains(&eps),
        "eps {} outside [1e-6, 1e-3]",
        eps
    );

    let (base, analytic) = f(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }

    let mut max_err: f64 = 0.0;
    for name in names {
        let grad = analytic
            .get(*name)
            .unwrap_or_else(|| panic!("no analytic gradient for `{name}`"))
            .clone();
        let n = store.get(name).len();
        assert_eq!(grad.len(), n, "gradient length mismatch for `{name}`");

        for k in 0..n {
            let orig = store.get(name).values()[k];

            store.get_mut(name).values_mut()[k] = orig + eps;
            let (f_plus, _) = f(store)?;
            store.get_mut(name).values_mut()[k] = orig - eps;
            let (f_minus, _) = f(store)?;
            store.get_mut(name).values_mut()[k] = orig;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check objective while perturbing `{name}`[{k}]"
                )));
            }

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let err = if numeric.abs() < 1e-8 {
                (grad[k] - numeric).abs()
            } else {
                (grad[k] - numeric).abs() / numeric.abs()
            };
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DiffArray, Tape};

    #[test]
    fn quadratic_has_analytic_gradient() {
        // f(θ) = θᵀθ at θ = [1, 2]; grad = [2, 4].
        let mut store = ParamStore::new();
        store
            .register("theta", DiffArray::vector(vec![1.0, 2.0]))
            .unwrap();

        let max_err = grad_check(&mut store, &["theta"], 1e-5, |s| {
            let mut tape = Tape::new();
            let theta = tape.param(s, "theta");
            let sq = tape.mul(theta, theta);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss)?;
            let mut map = GradMap::new();
            map.insert("theta".into(), grads.get(theta).to_vec());
            Ok((tape.scalar(loss), map))
        })
        .unwrap();

        assert!(max_err < 1e-8, "max_err = {max_err}");
    }

    #[test]
    #[should_panic(expected = "eps")]
    fn eps_out_of_range_panics() {
        let mut store = ParamStore::new();
        store.register("x", DiffArray::scalar(1.0)).unwrap();
        let _ = grad_check(&mut store, &["x"], 1e-2, |_| {
            Ok((0.0, GradMap::new()))
        });
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        store.register("x", DiffArray::scalar(1.0)).unwrap();
        let res = grad_check(&mut store, &["x"], 1e-5, |_| {
            Ok((f64::NAN, GradMap::new()))
        });
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
