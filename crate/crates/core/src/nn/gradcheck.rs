//! Central finite-difference gradient checks.
//!
//! These are oracles for the analytic backward pass: they only evaluate the
//! forward function, never the tape's gradients.

/// Relative error `|a − n| / max(|a|, |n|, floor)` used by the checks.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to coordinate `i` of `x`.
pub fn central_difference(x: &mut [f64], i: usize, step: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + step;
    let plus = f(x);
    x[i] = orig - step;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * step)
}

/// Indices spread deterministically over `0..n`, at most `count` of them.
pub fn sample_indices(n: usize, count: usize) -> Vec<usize> {
    if n <= count {
        return (0..n).collect();
    }
    let mut out: Vec<usize> = (0..count).map(|k| (k * 7919 + k * k * 31) % n).collect();
    out.sort_unstable();
    out.dedup();
    out
}
