//! Gains with the preview decoupled against the textbook Riccati iteration.

use ene_core::model::LinearConstraints;
use ene_core::numerics::{Mat, Vector};
use ene_core::ocp::{solve_nominal, SolveOptions};
use ene_core::oracle::discrete_lqr;
use ene_core::systems::{lqr_preview_system, scalar_system, FixtureOptions, LqrFixture};
use ene_core::mene::segment_model;
use ene_core::ene::{GainSchedule, GainVariant, RecursionMode};
use proptest::prelude::*;

fn schedule(fixture: &LqrFixture, horizon: usize, seed: u64) -> GainSchedule {
    let d = fixture.dims();
    let x0 = Vector::from_fn(d.state, |i, _| 0.3 * (i as f64 + 1.0) * if seed.is_multiple_of(2) { 1.0 } else { -1.0 });
    let w0 = Vector::from_element(d.preview, 0.2);
    let problem = fixture.problem(horizon, LinearConstraints::none(d), x0, w0).unwrap();
    let nominal = solve_nominal(&problem, &SolveOptions::default()).unwrap();
    assert!(nominal.is_optimal);
    segment_model(&problem, &nominal.trajectory, RecursionMode::Optimal, GainVariant::Extended)
        .unwrap()
        .gains
}

fn blocks(fixture: &LqrFixture) -> (Mat, Mat, Mat) {
    let d = fixture.dims();
    let (n, m) = (d.state, d.control);
    let stage = &fixture.cost.stage_weight;
    let q = stage.view((0, 0), (n, n)).into_owned();
    let r = stage.view((n, n), (m, m)).into_owned();
    let qf = fixture.cost.terminal_weight.view((0, 0), (n, n)).into_owned();
    (q, r, qf)
}

fn check_against_riccati(n: usize, m: usize, seed: u64, horizon: usize) -> (f64, f64) {
    let fixture = lqr_preview_system(n, m, seed, FixtureOptions { decoupled: true }).unwrap();
    let gains = schedule(&fixture, horizon, seed);
    let (q, r, qf) = blocks(&fixture);
    let lqr = discrete_lqr(&fixture.model.a, &fixture.model.b, &q, &r, &qf, horizon).unwrap();
    let mut k1_err = 0.0f64;
    let mut k2_max = 0.0f64;
    for k in 0..horizon {
        k1_err = k1_err.max((&gains.steps[k].k1 + &lqr.gains[k]).amax());
        k2_max = k2_max.max(gains.steps[k].k2.amax());
    }
    (k1_err, k2_max)
}

#[test]
fn decoupled_fixtures_reproduce_the_riccati_gains() {
    for seed in 0..10 {
        let (n, m) = (1 + (seed % 4) as usize, 1 + ((seed / 2) % 2) as usize);
        let (k1_err, k2_max) = check_against_riccati(n, m, seed, 6);
        assert!(k1_err <= 1e-8, "seed {seed}: K1 off by {k1_err:.3e}");
        assert_eq!(k2_max, 0.0, "seed {seed}: K2 not identically zero");
    }
}

#[test]
fn value_blocks_match_the_cost_to_go() {
    let fixture = lqr_preview_system(3, 2, 5, FixtureOptions { decoupled: true }).unwrap();
    let gains = schedule(&fixture, 5, 5);
    let (q, r, qf) = blocks(&fixture);
    let lqr = discrete_lqr(&fixture.model.a, &fixture.model.b, &q, &r, &qf, 5).unwrap();
    for k in 0..=5 {
        assert!((&gains.value_xx[k] - &lqr.cost_to_go[k]).amax() <= 1e-8, "step {k}");
    }
}

#[test]
fn scalar_two_step_gains_by_hand() {
    // a = b = q = r = qf = 1: P(2) = 1, K(1) = 1/2, P(1) = 3/2, K(0) = 3/5.
    let fixture = scalar_system(1.0, 1.0, 1.0, 1.0, 1.0);
    let gains = schedule(&fixture, 2, 0);
    assert!((gains.steps[0].k1[(0, 0)] + 0.6).abs() < 1e-12);
    assert!((gains.steps[1].k1[(0, 0)] + 0.5).abs() < 1e-12);
    assert!((gains.value_xx[1][(0, 0)] - 1.5).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn riccati_agreement_holds_for_random_fixtures(seed in 0u64..5000, n in 1usize..=4, m in 1usize..=2, horizon in 1usize..=6) {
        let (k1_err, k2_max) = check_against_riccati(n, m, seed, horizon);
        prop_assert!(k1_err <= 1e-8);
        prop_assert_eq!(k2_max, 0.0);
    }
}
