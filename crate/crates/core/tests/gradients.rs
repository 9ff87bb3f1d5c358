//! Analytic gradients against central finite differences of a loss that is
//! recomputed here from scratch.

mod common;

use common::{proser_gradient_error, regime_gradient_error, GRADIENT_TOL};
use openset::training::Regime;

fn check(regime: Regime) {
    for seed in 0..5 {
        let e = regime_gradient_error(regime, seed);
        assert!(e < GRADIENT_TOL, "seed {seed}: relative error {e}");
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    check(Regime::SoftMax);
}

#[test]
fn garbage_gradient_matches_finite_differences() {
    check(Regime::Garbage);
}

#[test]
fn eos_gradient_matches_finite_differences() {
    check(Regime::Eos);
}

#[test]
fn proser_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let e = proser_gradient_error(seed);
        assert!(e < GRADIENT_TOL, "seed {seed}: relative error {e}");
    }
}
