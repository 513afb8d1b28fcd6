mod support;

use proptest::prelude::*;
use support::{generator_objective_gradient_error, primitive_gradient_errors};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_matches_central_differences(seed in any::<u64>()) {
        for (op, err) in primitive_gradient_errors(seed) {
            prop_assert!(err < 1e-6, "{op}: relative error {err:e}");
        }
    }
}

#[test]
fn generator_objective_matches_central_differences() {
    for seed in [77, 78, 79] {
        let err = generator_objective_gradient_error(seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}
