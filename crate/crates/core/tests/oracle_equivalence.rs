//! The backward recursions against the dense stacked-QP oracle.

use ene_core::costates::costates_from_linearization;
use ene_core::diagnostics::{fixture_case, recursion_vs_oracle, FixtureCase, FIXTURE_SEEDS};
use ene_core::ene::{hamiltonian_blocks_from, propagate_perturbation, riccati_backward, GainVariant, RecursionMode, RiccatiOptions};
use ene_core::numerics::Vector;
use ene_core::ocp::{linearize, rollout_from, Trajectory};
use ene_core::oracle::{solve_stacked_qp, QpLinearTerms};

fn max_diff(a: &[Vector], b: &[Vector]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

#[test]
fn extended_recursion_matches_the_stacked_qp_on_every_fixture() {
    for seed in FIXTURE_SEEDS {
        let case = fixture_case(seed).unwrap();
        assert!(case.active_steps() > 0, "seed {seed} has no saturated step");
        let a = recursion_vs_oracle(&case).unwrap();
        assert!(a.max_difference <= 1e-6, "seed {seed}: {:.3e}", a.max_difference);
        assert!(a.recursion.du.iter().any(|u| u.amax() > 1e-6), "seed {seed}: trivial response");
    }
}

#[test]
fn predicted_multiplier_shifts_match_the_qp_multipliers() {
    for seed in FIXTURE_SEEDS {
        let case = fixture_case(seed).unwrap();
        let a = recursion_vs_oracle(&case).unwrap();
        for (k, active) in case.nominal.trajectory.active.iter().enumerate() {
            assert_eq!(a.recursion.dmu[k].len(), active.len());
            assert_eq!(a.oracle.dmu[k].len(), active.len());
            if !active.is_empty() {
                let err = (&a.recursion.dmu[k] - &a.oracle.dmu[k]).amax();
                assert!(err <= 1e-6, "seed {seed} step {k}: {err:.3e}");
            }
        }
    }
}

/// Shift the controls of a fixture's optimum at unconstrained steps and roll
/// the plant forward, keeping the optimum's active sets.
fn off_optimal(case: &FixtureCase, shift: f64) -> Trajectory {
    let nominal = &case.nominal.trajectory;
    let controls: Vec<Vector> = nominal
        .u
        .iter()
        .zip(&nominal.active)
        .map(|(u, a)| if a.is_empty() { u.map(|c| c + shift) } else { u.clone() })
        .collect();
    let mut traj = rollout_from(&case.problem, &case.problem.x0, &case.problem.w0, &controls, None).unwrap();
    traj.active = nominal.active.clone();
    traj
}

#[test]
fn corrected_recursion_matches_the_qp_with_gradient_terms() {
    for seed in FIXTURE_SEEDS {
        let case = fixture_case(seed).unwrap();
        let traj = off_optimal(&case, 0.05);
        let lin = linearize(&case.problem, &traj).unwrap();
        let costates = costates_from_linearization(&lin, &traj.active).unwrap();
        assert!(costates.stationarity_norm() > 1e-4, "seed {seed}: nominal is still stationary");
        let blocks = hamiltonian_blocks_from(&case.problem, &traj, &costates).unwrap();
        let opts = RiccatiOptions {
            restore_constraints: true,
            ..RiccatiOptions::new(RecursionMode::NonOptimal, GainVariant::Extended)
        };
        let gains = riccati_backward(&lin, &blocks, &traj.active, &costates, &opts).unwrap();
        let predicted = propagate_perturbation(&lin, &gains, &case.dx0, &case.dw0).unwrap();
        let oracle = solve_stacked_qp(
            &lin,
            &blocks,
            &traj.active,
            &case.dx0,
            &case.dw0,
            QpLinearTerms {
                h_u: Some(&costates.h_u),
                restore_constraints: true,
            },
        )
        .unwrap();
        let err = max_diff(&predicted.dx, &oracle.dx)
            .max(max_diff(&predicted.du, &oracle.du))
            .max(max_diff(&predicted.dw, &oracle.dw));
        assert!(err <= 1e-6, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn optimal_mode_misses_the_gradient_terms_off_the_optimum() {
    let case = fixture_case(3).unwrap();
    let traj = off_optimal(&case, 0.05);
    let lin = linearize(&case.problem, &traj).unwrap();
    let costates = costates_from_linearization(&lin, &traj.active).unwrap();
    let blocks = hamiltonian_blocks_from(&case.problem, &traj, &costates).unwrap();
    let optimal = riccati_backward(
        &lin,
        &blocks,
        &traj.active,
        &costates,
        &RiccatiOptions::new(RecursionMode::Optimal, GainVariant::Extended),
    )
    .unwrap();
    let predicted = propagate_perturbation(&lin, &optimal, &case.dx0, &case.dw0).unwrap();
    let oracle = solve_stacked_qp(
        &lin,
        &blocks,
        &traj.active,
        &case.dx0,
        &case.dw0,
        QpLinearTerms {
            h_u: Some(&costates.h_u),
            restore_constraints: false,
        },
    )
    .unwrap();
    assert!(max_diff(&predicted.du, &oracle.du) > 1e-4);
}
