use lesionforge_core::checks::{gradient_suite, GRADCHECK_TOLERANCE};

#[test]
fn every_layer_and_architecture_matches_finite_differences() {
    let checks = gradient_suite(2024).unwrap();
    assert_eq!(checks.len(), 8);
    for c in &checks {
        assert!(c.params_checked > 0 || c.name == "elu" || c.name == "relu", "{c:?}");
        assert!(c.max_error() < GRADCHECK_TOLERANCE, "{c:?}");
    }
}
