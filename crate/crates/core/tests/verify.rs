use vbfn_core::verify::{run_verify, suite_names, Fault};

#[test]
fn every_fast_suite_passes() {
    for name in suite_names().into_iter().filter(|n| *n != "smoke") {
        let checks = run_verify(Some(name), Fault::None, |_| {}).unwrap();
        assert!(!checks.is_empty());
        for c in &checks {
            assert!(c.passed, "{c}");
        }
    }
}

#[test]
fn sign_fault_is_caught_by_spd_and_structure() {
    for name in ["spd", "structure"] {
        let checks = run_verify(Some(name), Fault::LaplacianSign, |_| {}).unwrap();
        assert!(checks.iter().any(|c| !c.passed), "{name} missed the fault");
    }
}
