//! Minimal reverse-mode differentiation core.
//!
//! A fresh [`Tape`] is built for every optimization iteration: ops are
//! evaluated eagerly as they are recorded, so downstream recording decisions
//! (sample coverage, ray renderability) can inspect forward values. The
//! backward pass walks the tape once in reverse and accumulates gradients
//! into the [`ParamStore`].

mod optim;
mod tape;

pub use optim::{AdamConfig, Param, ParamId, ParamStore};
pub use tape::{NodeId, Tape, TrilerpPlan, TrilerpRow};

/// Numerically safe logistic function.
///
/// Output is clamped to the open interval (0, 1): plain `1/(1+e^-x)` rounds
/// to exactly 1.0 for x above ~36.7 in f64, which breaks the strict range
/// guarantee downstream weight formulas rely on.
pub fn sigmoid(x: f64) -> f64 {
    const ONE_MINUS_ULP: f64 = 0.999_999_999_999_999_9;
    let y = 1.0 / (1.0 + (-x).exp());
    y.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_strictly_inside_unit_interval() {
        for &x in &[
            0.0,
            1.0,
            -1.0,
            36.0,
            37.0,
            40.0,
            700.0,
            -700.0,
            1e300,
            -1e300,
            f64::MAX,
            f64::MIN,
        ] {
            let y = sigmoid(x);
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y} escaped (0,1)");
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
