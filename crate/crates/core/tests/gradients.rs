//! Analytic gradients against central finite differences, 100 random
//! instances per target.

use frcl_core::gradcheck::{run_suite, Target};

const REL_TOL: f64 = 1e-4;
const INSTANCES: usize = 100;

fn check(target: Target, seed: u64) {
    let r = run_suite(target, INSTANCES, seed).unwrap();
    assert!(
        r.worst_relative_error <= REL_TOL,
        "{}: worst relative error {:e}",
        target.name(),
        r.worst_relative_error
    );
}

#[test]
fn feature_net_backward_matches_finite_differences() {
    check(Target::FeatureNet, 1);
}

#[test]
fn functional_kl_gradient_matches_finite_differences() {
    check(Target::FunctionalKl, 2);
}

#[test]
fn objective_theta_gradient_matches_finite_differences() {
    check(Target::ObjectiveTheta, 3);
}

#[test]
fn objective_mean_gradient_matches_finite_differences() {
    check(Target::ObjectiveMean, 4);
}

#[test]
fn objective_factor_gradient_matches_finite_differences() {
    check(Target::ObjectiveFactor, 5);
}
