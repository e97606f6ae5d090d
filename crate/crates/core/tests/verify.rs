use adala_core::verify;

#[test]
fn every_suite_passes() {
    for r in verify::run_all() {
        println!("{} {} {}", r.name, r.passed, r.detail);
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
}
