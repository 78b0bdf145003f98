mod common;

use common::*;
use proptest::prelude::*;

#[test]
fn backward_matches_central_differences_on_tiny_nets() {
    let mut checked = 0;
    for seed in 0..40 {
        let (net, inputs, labels) = tiny_problem(seed);
        if let Some(err) = gradient_check(&net, &inputs, &labels, 1e-6) {
            assert!(err <= 1e-4, "seed {seed}: relative error {err:.2e}");
            checked += 1;
        }
    }
    assert!(checked >= 30, "only {checked} nets away from top-k ties");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_check_holds_for_random_seeds(seed in 10_000u64..1_000_000) {
        let (net, inputs, labels) = tiny_problem(seed);
        if let Some(err) = gradient_check(&net, &inputs, &labels, 1e-6) {
            prop_assert!(err <= 1e-4, "relative error {:.2e}", err);
        }
    }
}
