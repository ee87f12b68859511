mod common;

use common::{grad_check, grad_fixture};

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..3 {
        let fx = grad_fixture(seed);
        let r = grad_check(&fx, 1e-5, 1e-6, 1e-4);
        println!("seed {seed}: {} scalars, worst rel {:.3e}, worst abs {:.3e}", r.checked, r.worst_rel, r.worst_abs);
        assert!(r.worst_rel <= 1e-4, "seed {seed}: relative error {}", r.worst_rel);
    }
}
