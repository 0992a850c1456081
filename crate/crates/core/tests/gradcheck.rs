#[path = "common/gradcheck.rs"]
mod gradcheck;

use gradcheck::{gradient_suite, INSTANCES, TOLERANCE};

#[test]
fn analytic_gradients_match_finite_differences() {
    let results = gradient_suite(11);
    assert_eq!(results.len(), 15);
    for (op, n, err) in results {
        println!("{op}: {n} instances, worst {err:.2e}");
        assert!(n >= INSTANCES);
        assert!(err < TOLERANCE, "{op}: relative error {err:e}");
    }
}
