mod common;

use common::gradops::{composite_check, op_checks};

#[test]
fn every_operation_matches_central_differences() {
    for (name, worst) in op_checks() {
        assert!(worst < 1e-4, "{name}: relative error {worst:e}");
    }
}

#[test]
fn assembled_model_matches_central_differences() {
    let (checked, worst) = composite_check(10, 1e-6);
    assert!(checked >= 10 * 8, "only {checked} coordinates checked");
    assert!(worst < 1e-4, "relative error {worst:e}");
}
