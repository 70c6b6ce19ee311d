//! Solution and gain files.

use std::fs;

use ene_core::ene::GainVariant;
use ene_core::io::{load_gains, load_solution, save_gains, save_solution};
use ene_core::mene::single_segment_policy;
use ene_core::numerics::{Mat, Vector};
use ene_core::ocp::{solve_nominal, SolveOptions};
use ene_core::systems::ScenarioSpec;
use ene_core::EneError;

fn close(a: &[Vector], b: &[Vector]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).amax() <= 1e-15 * x.amax().max(1.0))
}

fn close_mats(a: &[Mat], b: &[Mat]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape() && (x - y).amax() <= 1e-15 * x.amax().max(1.0))
}

#[test]
fn solution_and_gains_round_trip() {
    let problem = ScenarioSpec::small().problem().unwrap();
    let solution = solve_nominal(&problem, &SolveOptions::default()).unwrap();
    let gains = single_segment_policy(&problem, &solution, GainVariant::Extended).unwrap().gains;
    let dir = tempfile::tempdir().unwrap();
    let (sp, gp) = (dir.path().join("s.json"), dir.path().join("g.json"));
    save_solution(&sp, &solution).unwrap();
    save_gains(&gp, &gains).unwrap();

    let s = load_solution(&sp).unwrap();
    assert!(close(&s.trajectory.x, &solution.trajectory.x));
    assert!(close(&s.trajectory.u, &solution.trajectory.u));
    assert!(close(&s.trajectory.w, &solution.trajectory.w));
    assert_eq!(s.trajectory.active, solution.trajectory.active);
    assert!(close(&s.costates.lambda, &solution.costates.lambda));
    assert!(close(&s.costates.lambda_bar, &solution.costates.lambda_bar));
    assert!(close(&s.costates.mu, &solution.costates.mu));
    assert_eq!(s.kkt_norm, solution.kkt_norm);

    let g = load_gains(&gp).unwrap();
    assert_eq!(g.horizon(), 35);
    for (loaded, original) in g.steps.iter().zip(&gains.steps) {
        let pairs = [
            (&loaded.k1, &original.k1),
            (&loaded.k2, &original.k2),
            (&loaded.k3, &original.k3),
            (&loaded.k4, &original.k4),
            (&loaded.k5, &original.k5),
        ];
        for (a, b) in pairs {
            assert!(close_mats(std::slice::from_ref(a), std::slice::from_ref(b)));
        }
    }
    assert!(close_mats(&g.value_xx, &gains.value_xx));
    assert!(close_mats(&g.value_ww, &gains.value_ww));
}

#[test]
fn shape_mismatch_is_rejected() {
    let problem = ScenarioSpec::small().problem().unwrap();
    let solution = solve_nominal(&problem, &SolveOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    save_solution(&path, &solution).unwrap();
    let text = fs::read_to_string(&path).unwrap().replacen("\"horizon\": 35", "\"horizon\": 34", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(load_solution(&path), Err(EneError::File { .. })));
}

#[test]
fn truncated_file_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    fs::write(&path, "{\n  \"version\": 1,\n  \"shape\": {").unwrap();
    let message = load_solution(&path).unwrap_err().to_string();
    assert!(message.contains("line 3") && message.contains("column"), "{message}");
}
