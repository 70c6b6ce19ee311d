//! Backward costates against forward sensitivity products.

use ene_core::costates::backward_costates;
use ene_core::model::LinearConstraints;
use ene_core::numerics::{Lcg, Vector};
use ene_core::ocp::{linearize, rollout, solve_nominal, SolveOptions};
use ene_core::oracle::forward_sensitivity_costates;
use ene_core::systems::{lqr_preview_system, FixtureOptions, ScenarioSpec};
use proptest::prelude::*;

fn max_diff(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax() / y.amax().max(1.0)).fold(0.0, f64::max)
}

#[test]
fn unconstrained_pendulum_rollout() {
    let spec = ScenarioSpec::small();
    let mut problem = spec.problem().unwrap();
    problem.constraints = std::sync::Arc::new(LinearConstraints::none(problem.dims()));
    let mut rng = Lcg::new(4);
    let controls: Vec<Vector> = (0..problem.horizon).map(|_| Vector::from_element(1, rng.uniform(-50.0, 50.0))).collect();
    let traj = rollout(&problem, &controls, None).unwrap();
    let costates = backward_costates(&problem, &traj).unwrap();
    let (lambda, lambda_bar) = forward_sensitivity_costates(&linearize(&problem, &traj).unwrap());
    assert!(max_diff(&costates.lambda, &lambda) <= 1e-9);
    assert!(max_diff(&costates.lambda_bar, &lambda_bar) <= 1e-9);
}

#[test]
fn pendulum_optimum_is_stationary() {
    let problem = ScenarioSpec::small().problem().unwrap();
    let nominal = solve_nominal(&problem, &SolveOptions::default()).unwrap();
    assert!(nominal.is_optimal && nominal.kkt_norm <= 1e-6);
    assert!(nominal.costates.stationarity_norm() <= 1e-6);
    let last = nominal.costates.lambda.len() - 1;
    let lin = linearize(&problem, &nominal.trajectory).unwrap();
    assert_eq!(nominal.costates.lambda[last], lin.psi_x());
    assert_eq!(nominal.costates.lambda_bar[last], lin.psi_w());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fixture_rollouts_agree(seed in 0u64..10_000, n in 1usize..=4, m in 1usize..=2, horizon in 1usize..=6) {
        let fixture = lqr_preview_system(n, m, seed, FixtureOptions::default()).unwrap();
        let d = fixture.dims();
        let mut rng = Lcg::new(seed);
        let problem = fixture
            .problem(
                horizon,
                LinearConstraints::none(d),
                Vector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0)),
                Vector::from_fn(d.preview, |_, _| rng.uniform(-1.0, 1.0)),
            )
            .unwrap();
        let controls: Vec<Vector> = (0..horizon).map(|_| Vector::from_fn(m, |_, _| rng.uniform(-1.0, 1.0))).collect();
        let traj = rollout(&problem, &controls, None).unwrap();
        let costates = backward_costates(&problem, &traj).unwrap();
        let (lambda, lambda_bar) = forward_sensitivity_costates(&linearize(&problem, &traj).unwrap());
        prop_assert!(max_diff(&costates.lambda, &lambda) <= 1e-10);
        prop_assert!(max_diff(&costates.lambda_bar, &lambda_bar) <= 1e-10);
    }
}
