use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared on an absolute scale; central
/// differences cannot resolve relative error below ~eps*|f|/h.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients against central differences with step
/// [`FD_STEP`].
///
/// `f` maps the parameter list to `(value, gradients)`, one gradient per
/// parameter. When `max_per_param` is set, at most that many elements of each
/// parameter are probed, chosen with `rng`.
pub fn grad_check<F>(
    name: &str,
    params: &mut [Tensor],
    mut f: F,
    tolerance: f64,
    max_per_param: Option<(usize, &mut dyn rand::RngCore)>,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut limit = max_per_param;
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
        passed: true,
    };
    for p in 0..params.len() {
        let n = params[p].len();
        let elements: Vec<usize> = match &mut limit {
            Some((k, rng)) if *k < n => {
                let mut idx = sample(rng, n, *k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for e in elements {
            let orig = params[p].data()[e];
            params[p].data_mut()[e] = orig + FD_STEP;
            let plus = f(params).0;
            params[p].data_mut()[e] = orig - FD_STEP;
            let minus = f(params).0;
            params[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[p].data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((p, e));
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    report
}

/// Random projection vector used to turn a tensor-valued layer into a scalar.
pub fn probe_like(t: &Tensor, rng: &mut impl Rng) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape copied from t")
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let mut p = vec![Tensor::scalar(3.0)];
        let r = grad_check("square", &mut p, |p| {
            let t = p[0].data()[0];
            (t * t, vec![Tensor::scalar(2.0 * t)])
        }, 1e-8, None);
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn sign_flip_detected() {
        let mut p = vec![Tensor::scalar(3.0)];
        let r = grad_check("bad", &mut p, |p| {
            let t = p[0].data()[0];
            (t * t, vec![Tensor::scalar(-2.0 * t)])
        }, 1e-6, None);
        assert!(!r.passed);
    }
}
