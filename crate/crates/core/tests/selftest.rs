use acv_core::selftest::{self, SelfTestOptions};

#[test]
fn every_suite_passes() {
    let results = selftest::run_all(&SelfTestOptions::default());
    for r in &results {
        println!("{}", r.line());
    }
    assert!(results.iter().all(|r| r.passed));
}

#[test]
fn wrong_patch_normalisation_is_caught() {
    let opts = SelfTestOptions { instances: 10, patch_norm_divisor: Some(3.0), ..Default::default() };
    let results = selftest::oracle_equivalence(&opts);
    for r in &results {
        let expect_fail = r.name == "oracle/build_patch_volume";
        assert_eq!(r.passed, !expect_fail, "{}", r.line());
    }
}
