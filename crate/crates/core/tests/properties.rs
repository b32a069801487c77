mod common;

use proptest::prelude::*;

use common::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn start_rule_is_measurable(
        pi in binary_policy(),
        states in proptest::collection::vec(-3.0f64..3.0, 10),
        tail in proptest::collection::vec(-5.0f64..5.0, 10),
        t in 1usize..=10,
    ) {
        measurability(&pi, &states, &tail, t)?;
    }

    #[test]
    fn multi_rule_is_measurable(
        pi in multi_policy(),
        states in proptest::collection::vec(0.0f64..10.0, 10),
        tail in proptest::collection::vec(-5.0f64..5.0, 10),
        t in 1usize..=10,
    ) {
        // One-dimensional histories exercise the first weight of each plane.
        measurability(&pi, &states, &tail, t)?;
    }

    #[test]
    fn treatment_persists(seed in any::<u64>(), sigma in 0.0f64..2.0) {
        persistence(seed, sigma)?;
    }

    #[test]
    fn folds_partition_indices(n in 2usize..300, q in 2usize..12, seed in any::<u64>()) {
        fold_exclusivity(n.max(q), q, seed)?;
    }

    #[test]
    fn death_is_absorbing(seed in any::<u64>(), sigma in 0.0f64..2.0) {
        terminal_absorption(seed, sigma)?;
    }

    #[test]
    fn contrasts_are_antisymmetric(seed in any::<u64>(), i in 0usize..64, j in 0usize..64) {
        antisymmetry(seed, i, j)?;
    }

    #[test]
    fn hamming_is_pseudometric(seed in any::<u64>(), a in binary_policy(), b in binary_policy(), c in binary_policy()) {
        hamming_pseudometric(seed, &a, &b, &c)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn results_ignore_thread_count(seed in any::<u64>(), threads in 2usize..6) {
        thread_determinism(seed, threads)?;
    }
}
