use ccdd_core::theoria::*;

#[test]
fn default_suite_passes() {
    let out = verify_suite(0).unwrap();
    println!("{}", out.table());
    println!("{}", out.csv());
    assert!(out.all_pass());
}
