use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `x * Phi(x)` with the exact (erf based) normal CDF.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// `Phi(x) + x * phi(x)`
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn gelu_in_place(xs: &mut [f64]) {
    for x in xs {
        *x = gelu(*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_asymptote() {
        assert_eq!(gelu(0.0), 0.0);
        let g = gelu(10.0);
        assert!(g > 9.999 && g <= 10.0, "{g}");
        assert!(gelu(-10.0).abs() < 1e-20);
    }

    #[test]
    fn derivative_matches_central_difference() {
        let eps = 1e-5;
        for &x in &[0.5, -1.3, 0.0, 2.2, -0.01] {
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            let an = gelu_derivative(x);
            let rel = (fd - an).abs() / an.abs().max(1e-12);
            assert!(rel < 1e-6, "x={x} fd={fd} analytic={an} rel={rel}");
        }
    }

    #[test]
    fn known_values() {
        // x * Phi(x) with Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.15865525393145707).abs() < 1e-15);
    }
}
