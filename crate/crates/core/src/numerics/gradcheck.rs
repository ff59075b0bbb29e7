use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`, evaluated in `f64`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p);
        p[i] = orig - eps;
        let down = f(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite_difference_gradient"));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps near-zero components from
/// dominating.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_relative_error<T: super::Scalar>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a.f64(), n))
        .fold(0.0, f64::max)
}
