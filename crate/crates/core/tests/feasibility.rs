mod common;

use common::rng;
use common::suites::feasibility_suite;
use proptest::prelude::*;
use rand::Rng;
use starris_core::channel::Topology;
use starris_core::mdp::{project_action, ActionLayout};
use starris_core::physics::{check_constraints, rate_report, Constraint, NumeratorForm};

fn layout_for(seed: u64) -> (Topology, ActionLayout) {
    let mut r = rng(seed);
    let topo = Topology::generated(
        r.random_range(1..=3),
        r.random_range(1..=4),
        r.random_range(1..=5),
        r.random_range(1..=3),
    )
    .unwrap();
    let layout = ActionLayout::new(&topo);
    (topo, layout)
}

#[test]
fn ten_thousand_raw_vectors_project_feasibly() {
    assert_eq!(feasibility_suite(10_000, 77), 0);
}

proptest! {
    #[test]
    fn extreme_inputs_stay_feasible(
        seed in 0u64..64,
        raw in proptest::collection::vec(prop_oneof![
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
            Just(0.0),
            Just(f64::MAX),
            Just(-f64::MAX),
        ], 400),
    ) {
        let (topo, layout) = layout_for(seed);
        let action = project_action(&layout, &raw[..layout.dim()], 20.0, 316.0).unwrap();
        let channels = starris_core::channel::sample_channels_from(&topo, &mut rng(seed)).unwrap();
        let report = rate_report(&topo, &channels, &action, 1e-13, 1.0, NumeratorForm::ServingLink).unwrap();
        let checks = check_constraints(&action, &report, 20.0, 0.0, 316.0);
        prop_assert!(checks.passes(&Constraint::PROJECTED), "{:?}", checks.failed());
    }

    #[test]
    fn wrong_length_is_rejected(seed in 0u64..64, extra in 1usize..5) {
        let (_, layout) = layout_for(seed);
        prop_assert!(project_action(&layout, &vec![0.0; layout.dim() + extra], 20.0, 316.0).is_err());
    }
}
