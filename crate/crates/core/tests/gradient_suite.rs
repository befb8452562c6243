use civt_core::suite;

#[test]
fn default_suite_passes() {
    let entries = suite::run(&suite::default_checks());
    for e in &entries {
        println!("{}", e.line());
    }
    assert!(entries.len() >= 12);
    let failed: Vec<_> = entries.iter().filter(|e| !e.report.passed).map(|e| e.line()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
