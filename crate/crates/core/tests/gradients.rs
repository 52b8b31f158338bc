mod common;

use dfml_core::diffcore::gradcheck::check_gradients;
use dfml_core::losses::{Ablation, Objective};

#[test]
fn every_operation_matches_finite_differences() {
    for (name, inputs, build) in common::op_cases() {
        let rep = check_gradients(&inputs, build).unwrap();
        assert!(rep.max_rel_error <= common::GRAD_TOL, "{name}: {rep:?}");
        assert!(rep.checked > 0, "{name}");
    }
}

#[test]
fn full_objective_matches_finite_differences() {
    for mode in [Ablation::Full, Ablation::Baseline, Ablation::Mlfe, Ablation::Mlfc, Ablation::BaselineNocl] {
        let c = common::objective_gradient_check(&Objective::new(mode));
        assert!(c.params <= 500, "{} parameters", c.params);
        assert_eq!(c.checked, c.params);
        assert!(c.max_grad > 0.0, "{mode}: all-zero gradient");
        assert!(c.worst_rel <= common::GRAD_TOL, "{mode}: {:e}", c.worst_rel);
    }
}
