use massgrid::experiments::{verify_suite, VerifyOptions};

#[test]
fn corrupted_symmetry_is_caught() {
    let report = verify_suite(&VerifyOptions {
        corrupt_symmetry: true,
        only: Some(&["summation-by-parts"]),
        ..VerifyOptions::default()
    });
    assert!(!report.check("summation-by-parts").unwrap().passed);
}

#[test]
fn dual_path_survives_a_hundredfold_tighter_tolerance() {
    let report = verify_suite(&VerifyOptions {
        tolerance_scale: 0.01,
        only: Some(&["dual-path-agreement", "summation-by-parts"]),
        ..VerifyOptions::default()
    });
    assert_eq!(report.checks.len(), 2);
    assert!(report.all_passed(), "{:?}", report.checks);
}

#[test]
fn seeds_change_the_fields_not_the_verdicts() {
    for seed in [1, 2] {
        let report = verify_suite(&VerifyOptions {
            seed,
            only: Some(&["variational-lower-bound"]),
            ..VerifyOptions::default()
        });
        assert!(report.all_passed(), "{:?}", report.checks);
    }
}
