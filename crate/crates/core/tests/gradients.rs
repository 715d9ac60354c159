use acv_core::gradcheck;

#[test]
fn every_operator_matches_finite_differences() {
    let checks = gradcheck::run_all(3).unwrap();
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{:<28} max_rel={:.2e} max_abs={:.2e} coords={} {}",
            c.name,
            c.report.max_rel_err,
            c.report.max_abs_err,
            c.report.checked,
            if c.report.passed() { "ok" } else { "FAIL" }
        );
        if !c.report.passed() {
            failed.push(c.name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn end_to_end_check_holds_across_seeds() {
    for seed in 1..=8 {
        let r = gradcheck::end_to_end(seed).unwrap().report;
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}
