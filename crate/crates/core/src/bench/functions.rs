//! Synthetic test functions, in raw coordinates.

use std::f64::consts::PI;

use crate::error::EvalError;

/// `4(1 − sin(6x + 8e^{6x−7}))` on `[0,1]`.
pub fn f1(x: f64) -> f64 {
    4.0 * (1.0 - (6.0 * x + 8.0 * (6.0 * x - 7.0).exp()).sin())
}

fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    let z = (x - m) / s;
    (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * s)
}

/// Sum of two normal densities centred at 0.2 and 0.8, both with sd 0.05.
pub fn f2(x: f64) -> f64 {
    normal_pdf(x, 0.2, 0.05) + normal_pdf(x, 0.8, 0.05)
}

/// Three-dimensional polynomial with a square-root term; needs `x₃ ≥ −1`.
pub fn f3(x: &[f64]) -> Result<f64, EvalError> {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    if x3 < -1.0 || x3.is_nan() {
        return Err(EvalError::Domain(x.to_vec()));
    }
    let a = x1 + 8.0 * x2 - 8.0 * x2 * x2 - 2.0;
    let b = 3.0 - 4.0 * x2;
    let c = 2.0 * x3 - 1.0;
    Ok(4.0 * a * a + b * b + 16.0 * (x3 + 1.0).sqrt() * c * c)
}

/// `10 sin(πx₁x₂) + 20(x₃−5)² + 10x₄ + 5x₅`.
pub fn f4(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 5.0).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}
