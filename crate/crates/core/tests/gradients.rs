mod common;

use common::grads::{loss_cases, op_cases};

#[test]
fn every_op_matches_central_differences() {
    for (name, case) in op_cases() {
        let n = case().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(n > 0, "{name} checked nothing");
    }
}

#[test]
fn total_loss_matches_central_differences() {
    for (name, case) in loss_cases() {
        case().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn checker_flags_a_cut_gradient_path() {
    let x = common::random_tensor(&mut common::rng(99), &[3], -1.0, 1.0);
    let res = common::gradcheck(&[x], |g, v| {
        let d = g.detach(v[0]);
        common::project(g, d, 1)
    });
    assert!(res.is_err());
}
