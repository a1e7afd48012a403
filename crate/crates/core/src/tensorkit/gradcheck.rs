//! Finite-difference gradient verification.
//!
//! The oracle is independent of the tape: it only re-evaluates a scalar
//! function of a flat `f64` vector. All checks run at `f64`; central
//! differences at `f32` cannot resolve the tolerances used here.

/// Central finite differences with step `h` on every coordinate of `x`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Directional derivative `(f(x + h v) - f(x - h v)) / (2 h)`; a cheap probe
/// of the whole gradient through a random direction.
pub fn directional_fd(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], v: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(v).map(|(&a, &b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(&a, &b)| a - h * b).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Worst floored relative error between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub worst: usize,
}

/// Compare coordinate-wise with relative error floored at `floor`:
/// `|a - n| / max(|a|, |n|, floor)`. The floor absorbs finite-difference
/// noise on coordinates whose true gradient is at or near zero.
pub fn check_against_fd(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel = 0.0;
    let mut worst = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    GradCheckReport { max_rel, worst }
}
