//! Central finite differences in fp64.

/// Gradient of a scalar-valued fp64 function with respect to one input
/// buffer, by central differences with step h.
pub fn central_diff<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max-norm relative error between an analytic gradient and a reference.
/// The denominator floors at 1e-6 so near-zero gradients do not explode.
pub fn rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let num = analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a as f64 - r).abs())
        .fold(0.0, f64::max);
    let den = reference.iter().map(|r| r.abs()).fold(0.0, f64::max).max(1e-6);
    num / den
}
