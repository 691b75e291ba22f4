//! Central finite-difference verification of analytic gradients.
//!
//! The expected values come from difference quotients of the real forward
//! pass, never from the backward pass under test. Losses are read out in f64
//! (see `Tape::scalar_f64`) so the quotient is not limited by f32 resolution.

/// Central difference df/dθ_i at the selected coordinates.
/// `f` must be a pure function of the parameter vector.
pub fn finite_diff(
    f: &dyn Fn(&[f32]) -> f64,
    theta: &[f32],
    indices: &[usize],
    h: f32,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len());
    let mut work = theta.to_vec();
    for &i in indices {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        out.push((up - down) / (2.0 * h as f64));
    }
    out
}

/// Result of comparing analytic gradients against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Absolute disagreement below this is attributed to f32 storage noise and
/// accepted regardless of relative error: intermediate activations round at
/// ~6e-8 relative, and the central quotient divides that noise by 2h = 2e-3.
pub const ABS_FLOOR: f64 = 5e-5;

/// Compare analytic gradients with central differences at `indices`.
pub fn compare(
    f: &dyn Fn(&[f32]) -> f64,
    analytic: &[f32],
    theta: &[f32],
    indices: &[usize],
    h: f32,
) -> GradCheck {
    let fd = finite_diff(f, theta, indices, h);
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for (&i, &fdv) in indices.iter().zip(&fd) {
        let av = analytic[i] as f64;
        let err = (av - fdv).abs();
        if err <= ABS_FLOOR {
            continue;
        }
        let rel = err / av.abs().max(fdv.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheck { max_rel_err, worst_index, checked: indices.len() }
}

/// Evenly spread sample of coordinate indices for large parameter vectors.
pub fn sample_indices(len: usize, want: usize) -> Vec<usize> {
    if len <= want {
        return (0..len).collect();
    }
    (0..want).map(|i| i * len / want).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_quadratic() {
        // f = sum(x^2); df/dx_i = 2 x_i
        let f = |x: &[f32]| x.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let theta = vec![0.5f32, -1.5, 2.0];
        let fd = finite_diff(&f, &theta, &[0, 1, 2], 1e-3);
        for (i, &g) in fd.iter().enumerate() {
            let expect = 2.0 * theta[i] as f64;
            // f32 parameter rounding limits the quotient to ~1e-4 accuracy
            assert!((g - expect).abs() < 2e-4, "i={i} g={g} expect={expect}");
        }
    }

    #[test]
    fn compare_flags_wrong_gradients() {
        let f = |x: &[f32]| x.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let theta = vec![1.0f32, 2.0];
        let wrong = vec![2.0f32, 3.0]; // second entry should be 4
        let report = compare(&f, &wrong, &theta, &[0, 1], 1e-3);
        assert!(report.max_rel_err > 0.2);
        assert_eq!(report.worst_index, 1);
    }
}
