//! Central finite differences, used by the gradient-check tests as an
//! implementation-independent oracle.

use crate::error::{Error, Result};

use super::Vector;

/// Central-difference gradient of `f` at `x` with step `h`:
/// `g_i = (f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// If `f` returns NaN/inf at any probe point, the error names the coordinate
/// being probed.
pub fn finite_diff_grad<F>(mut f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidParam {
            name: "h",
            value: h,
            reason: "finite-difference step must be positive and finite",
        });
    }
    let mut grad = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.get(i);
        probe.set(i, orig + h);
        let fp = f(&probe);
        if !fp.is_finite() {
            return Err(Error::NonFiniteProbe { coord: i });
        }
        probe.set(i, orig - h);
        let fm = f(&probe);
        if !fm.is_finite() {
            return Err(Error::NonFiniteProbe { coord: i });
        }
        probe.set(i, orig);
        grad.set(i, (fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_to_roundoff() {
        // f(x) = sum x_i^2 has gradient 2x; central differences are exact for
        // quadratics up to floating-point roundoff.
        let x = Vector::new(vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|v| v.data().iter().map(|a| a * a).sum(), &x, 1e-5).unwrap();
        for i in 0..3 {
            assert!((g.get(i) - 2.0 * x.get(i)).abs() < 1e-9, "coord {i}");
        }
    }

    #[test]
    fn non_finite_objective_names_the_coordinate() {
        let x = Vector::new(vec![0.0, 1.0]).unwrap();
        let err = finite_diff_grad(
            |v| if v.get(1) > 1.0 { f64::NAN } else { 0.0 },
            &x,
            1e-3,
        )
        .unwrap_err();
        match err {
            Error::NonFiniteProbe { coord } => assert_eq!(coord, 1),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Vector::new(vec![1.0]).unwrap();
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, -1e-5).is_err());
    }
}
