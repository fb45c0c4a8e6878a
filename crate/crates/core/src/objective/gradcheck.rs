//! Central-difference gradients for validating backward implementations.

/// Numeric gradient of `f` at `point`: coordinate-wise central differences
/// with step `h`. The function is evaluated 2 * len times; `f` must be
/// deterministic and continuous in a neighborhood of `point` (truncation
/// boundaries are the caller's to avoid; see `retention_margin`).
pub fn grad_check<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h.is_finite() && h > 0.0, "step must be positive, got {h}");
    let mut x = point.to_vec();
    let mut grad = vec![0.0; point.len()];
    for k in 0..point.len() {
        let orig = x[k];
        x[k] = orig + h;
        let fp = f(&x);
        x[k] = orig - h;
        let fm = f(&x);
        x[k] = orig;
        grad[k] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_to_truncation_order() {
        // f(x) = sum i * x_i^2 has gradient 2 i x_i; central differences on
        // a quadratic are exact up to rounding.
        let point = vec![0.5, -1.25, 2.0, 0.0];
        let g = grad_check(
            |x| x.iter().enumerate().map(|(i, &v)| i as f64 * v * v).sum(),
            &point,
            1e-6,
        );
        for (i, (&gv, &pv)) in g.iter().zip(&point).enumerate() {
            let expect = 2.0 * i as f64 * pv;
            assert!((gv - expect).abs() < 1e-8, "coord {i}: {gv} vs {expect}");
        }
    }

    #[test]
    fn cubic_truncation_error_shrinks_quadratically() {
        let f = |x: &[f64]| x[0] * x[0] * x[0];
        let point = [1.0];
        let coarse = (grad_check(f, &point, 1e-2)[0] - 3.0).abs();
        let fine = (grad_check(f, &point, 1e-3)[0] - 3.0).abs();
        // Central differences are second order: a 10x smaller step should
        // shrink the error by about 100x.
        assert!(fine < coarse / 50.0, "coarse {coarse:.3e} fine {fine:.3e}");
    }

    #[test]
    #[should_panic(expected = "step must be positive")]
    fn zero_step_is_refused() {
        grad_check(|_| 0.0, &[1.0], 0.0);
    }
}
