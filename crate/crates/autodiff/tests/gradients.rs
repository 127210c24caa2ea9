use slpgen_autodiff::gradcheck::op_suite;

#[test]
fn every_op_matches_finite_differences() {
    let reports = op_suite(0x5eed, 100);
    for r in &reports {
        println!("{:<20} instances={:<4} max_rel_err={:.2e}", r.name, r.instances, r.max_rel_error);
    }
    for r in &reports {
        assert!(r.max_rel_error < 1e-3, "{} rel err {}", r.name, r.max_rel_error);
    }
}
