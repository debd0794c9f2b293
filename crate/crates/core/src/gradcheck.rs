//! Central finite-difference gradients.
//!
//! These helpers only ever evaluate forward passes, so they stay independent
//! of the tape's backward sweep and can serve as its oracle.

/// Central difference gradient of `f` at `x` with step `h`.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Guarded relative error: |a-n| / max(|a|, |n|, floor). The floor keeps
/// near-zero gradients from inflating the ratio with finite-difference noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Standard check at the spec's step size: rel error of `analytic` against the
/// central difference of `f`, floor 1e-3.
pub fn check_grad<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64]) -> f64 {
    let numeric = finite_difference(f, x, 1e-5);
    max_rel_err(analytic, &numeric, 1e-3)
}
