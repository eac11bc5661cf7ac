//! Central finite-difference oracle for gradient verification. Kept separate
//! from the kernels it checks: it only ever calls the caller-supplied loss
//! closure, never a backward pass.

/// Central differences (f(x+eps) - f(x-eps)) / (2 eps) per coordinate.
pub fn central_diff<F: FnMut(&[f32]) -> f64>(theta: &[f32], eps: f32, mut f: F) -> Vec<f64> {
    let mut grad = vec![0.0f64; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&work);
        work[i] = orig - eps;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps as f64);
    }
    grad
}

/// Relative L2 error between an analytic gradient and its finite-difference
/// estimate: ||a - b|| / max(||a||, ||b||, 1e-12).
pub fn vector_rel_error(analytic: &[f32], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&a, &b) in analytic.iter().zip(fd) {
        let a = a as f64;
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}
