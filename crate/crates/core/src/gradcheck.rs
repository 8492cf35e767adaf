//! Central finite-difference utilities used throughout the test suites to
//! validate analytic gradients independently of the tape.

/// Central difference `(f(+h) - f(-h)) / 2h` of a scalar function of a
/// perturbation around zero.
pub fn central_diff<F: FnMut(f64) -> f64>(step: f64, mut f: F) -> f64 {
    (f(step) - f(-step)) / (2.0 * step)
}

/// Relative error between an analytic and a numeric derivative with an
/// absolute floor so that near-zero pairs compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Check the gradient of `f` with respect to a flat parameter vector at `x0`
/// against central differences on `probes` randomly chosen coordinates.
/// Returns the worst relative error observed.
pub fn check_flat_gradient<F>(
    f: &mut F,
    x0: &[f64],
    analytic: &[f64],
    probes: &[usize],
    step: f64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut worst: f64 = 0.0;
    let mut x = x0.to_vec();
    for &i in probes {
        let orig = x[i];
        let fd = central_diff(step, |eps| {
            x[i] = orig + eps;
            let v = f(&x);
            x[i] = orig;
            v
        });
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}
