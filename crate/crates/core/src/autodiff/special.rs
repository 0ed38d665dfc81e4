//! Digamma, trigamma, tetragamma and log-gamma for positive arguments.
//!
//! All four shift the argument upward with the standard recurrences until
//! `x >= 6` and then evaluate a six-term asymptotic series.

use std::f64::consts::PI;

const SHIFT_THRESHOLD: f64 = 6.0;

/// psi(x) = ln x - 1/(2x) - sum B_2n / (2n x^2n)
pub fn digamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 / x - series
}

/// psi'(x) = 1/x + 1/(2x^2) + sum B_2n / x^(2n+1)
pub fn trigamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0)))));
    acc + inv + 0.5 * inv2 + series
}

/// psi''(x) = -1/x^2 - 1/x^3 - sum (2n+1) B_2n / x^(2n+2)
pub fn tetragamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * inv2
        * (0.5
            - inv2
                * (1.0 / 6.0
                    - inv2
                        * (1.0 / 6.0
                            - inv2 * (3.0 / 10.0 - inv2 * (5.0 / 6.0 - inv2 * 691.0 / 210.0)))));
    acc - inv2 - inv2 * inv - series
}

/// ln Gamma(x) via Stirling's series.
pub fn lgamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    // Accumulate the shift as a product of factors, folding into a log
    // before the product can overflow or underflow.
    let mut log_shift = 0.0;
    let mut prod = 1.0;
    while x < SHIFT_THRESHOLD {
        prod *= x;
        if !(1e-200..=1e200).contains(&prod) {
            log_shift += prod.ln();
            prod = 1.0;
        }
        x += 1.0;
    }
    log_shift += prod.ln();
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0
                                    - inv2 * (1.0 / 1188.0 - inv2 * 691.0 / 360360.0)))));
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + series - log_shift
}
