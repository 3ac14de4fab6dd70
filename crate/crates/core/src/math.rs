//! Scalar activation functions shared by the Gaussian pipeline, the tensor
//! engine, and the model. All of them are written in the numerically stable
//! form so the analytic derivatives used elsewhere match to machine
//! precision.

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on (0, inf).
pub fn inv_softplus(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y + (-(-y).exp()).ln_1p()
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    (p / (1.0 - p)).ln()
}

/// Tanh-form GELU. The derivative in [`gelu_grad`] is the exact derivative
/// of this expression, not of the erf definition.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_round_trips() {
        for &y in &[1e-4, 0.3, 1.0, 7.5, 40.0] {
            assert!((softplus(inv_softplus(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
        for &p in &[1e-6, 0.25, 0.5, 0.999] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn known_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(gelu(0.0).abs() < 1e-15);
        // FD sanity for the gelu pair.
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
