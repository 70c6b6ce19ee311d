//! Closed-loop runs of every controller on the pendulum scenarios.

use ene_core::sim::{compare_controllers, compare_scenarios, preview_model_sweep, standard_preview_models, ControllerKind};
use ene_core::systems::ScenarioSpec;

#[test]
fn small_scenario_runs_every_controller() {
    let c = compare_controllers(&ScenarioSpec::small(), &ControllerKind::ALL).unwrap();
    assert_eq!(c.results.len(), 6);
    for r in &c.results {
        assert!(r.completed(), "{}: {:?}", r.controller, r.failed);
        assert_eq!(r.x.len(), 36);
        assert_eq!(r.u.len(), 35);
        assert!(r.violations.is_empty(), "{}", r.controller);
    }
    let sorted: Vec<f64> = c.rows.iter().map(|r| r.performance).collect();
    assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    assert!(c.to_markdown().lines().count() >= 2 + 6);
}

#[test]
fn segmentation_is_inert_without_activity_changes() {
    let c = compare_controllers(&ScenarioSpec::small(), &ControllerKind::ALL).unwrap();
    let get = |k| c.result(k).unwrap();
    assert_eq!(get(ControllerKind::Mene).segments, 1);
    assert_eq!(get(ControllerKind::Ene).u, get(ControllerKind::Mene).u);
    assert_eq!(get(ControllerKind::Ne).u, get(ControllerKind::Mne).u);
}

#[test]
fn large_perturbation_splits_and_stays_feasible() {
    let c = compare_controllers(&ScenarioSpec::large(), &[ControllerKind::Mene, ControllerKind::Mne]).unwrap();
    for r in &c.results {
        assert!(r.completed(), "{}: {:?}", r.controller, r.failed);
        assert!(r.flips >= 1, "{}", r.controller);
        assert!(r.violations.is_empty(), "{}", r.controller);
    }
}

#[test]
fn preview_feedback_beats_state_feedback_under_measured_previews() {
    let specs = [ScenarioSpec::small(), ScenarioSpec::large(), ScenarioSpec::preview_sweep()];
    for c in compare_scenarios(&specs, &[ControllerKind::Ene, ControllerKind::Ne]) {
        let c = c.unwrap();
        let ene = c.result(ControllerKind::Ene).unwrap().performance;
        let ne = c.result(ControllerKind::Ne).unwrap().performance;
        assert!(ene < ne, "{}: ENE {ene} vs NE {ne}", c.scenario);
    }
}

#[test]
fn gain_controllers_are_much_cheaper_than_resolving() {
    let c = compare_controllers(&ScenarioSpec::small(), &[ControllerKind::Clnmpc, ControllerKind::Ene]).unwrap();
    let cl = c.result(ControllerKind::Clnmpc).unwrap().timing.median;
    let ene = c.result(ControllerKind::Ene).unwrap().timing.median;
    assert!(ene * 10.0 <= cl, "ENE {ene:.3e}s vs CLNMPC {cl:.3e}s");
}

#[test]
fn preview_model_sweep_covers_both_models() {
    let report = preview_model_sweep(&ScenarioSpec::preview_sweep(), &standard_preview_models()).unwrap();
    assert_eq!(report.entries.len(), 2);
    for e in &report.entries {
        assert!(e.ene.completed() && e.mene.completed());
        assert!(e.mene.violations.is_empty());
    }
    assert!(report.best < 2);
}

#[test]
fn csv_has_a_stable_header() {
    let c = compare_controllers(&ScenarioSpec::small(), &[ControllerKind::Ene]).unwrap();
    let csv = c.results[0].to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,x0,x1,x2,x3,u0,w0,w1,w2,w3,c0,c1"));
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert_eq!(last.len(), 12);
    assert_eq!(last[0], "35");
    // No control or constraint value on the terminal row.
    assert!(last[5].is_empty() && last[10].is_empty() && last[11].is_empty());
    assert!(!last[6].is_empty());
}
