//! Self-checks shared by the command-line `check` command and the test
//! suites: derivative verification, fixture agreement with the dense QP
//! oracle, Hessian blocks against differenced gradients, and the symmetry of
//! the value-function blocks.

use serde::{Deserialize, Serialize};

use crate::costates::CostateTrajectory;
use crate::ene::{
    hamiltonian_blocks_from, propagate_perturbation, GainSchedule, GainVariant, PerturbationTrajectory, RecursionMode,
};
use crate::error::{EneError, Result};
use crate::mene::segment_model;
use crate::model::{verify_derivatives, DerivativeReport, LinearConstraints, Probe};
use crate::numerics::{asymmetry, concat, fd_jacobian, max_abs, max_abs_vec, Lcg, Vector};
use crate::ocp::{solve_nominal, NominalSolution, OcpProblem, SolveOptions, Trajectory};
use crate::oracle::{solve_stacked_qp, QpLinearTerms, StackedQpSolution};
use crate::systems::{coupled_box_constraints, lqr_preview_system, FixtureOptions, LqrFixture, ScenarioSpec};

/// Seeds of the standard fixture sweep.
pub const FIXTURE_SEEDS: std::ops::Range<u64> = 0..10;

/// A seeded linear-quadratic problem with preview, solved to optimality,
/// whose box constraints are active on part of the horizon.
#[derive(Debug, Clone)]
pub struct FixtureCase {
    pub seed: u64,
    pub fixture: LqrFixture,
    pub problem: OcpProblem,
    pub nominal: NominalSolution,
    pub dx0: Vector,
    pub dw0: Vector,
}

impl FixtureCase {
    pub fn active_steps(&self) -> usize {
        self.nominal.trajectory.active.iter().filter(|a| !a.is_empty()).count()
    }
}

fn random_vector(rng: &mut Lcg, len: usize, scale: f64) -> Vector {
    Vector::from_fn(len, |_, _| rng.uniform(-scale, scale))
}

/// Box bounds tried in turn, as fractions of the largest unconstrained control.
const BOUND_FRACTIONS: [f64; 3] = [0.6, 0.4, 0.25];

/// Dimensions cycle through `n ∈ 1..=4`, `m ∈ 1..=2`, `N ∈ 3..=6`. The box
/// bound is tightened until the constrained optimum saturates somewhere.
pub fn fixture_case(seed: u64) -> Result<FixtureCase> {
    let n = 1 + (seed % 4) as usize;
    let m = 1 + ((seed / 2) % 2) as usize;
    let horizon = 3 + ((seed / 3) % 4) as usize;
    let fixture = lqr_preview_system(n, m, seed, FixtureOptions::default())?;
    let d = fixture.dims();
    let mut rng = Lcg::new(seed.wrapping_add(0x00f1_7e5e));
    let x0 = random_vector(&mut rng, d.state, 2.0);
    let w0 = random_vector(&mut rng, d.preview, 1.0);
    let dx0 = random_vector(&mut rng, d.state, 0.01);
    let dw0 = random_vector(&mut rng, d.preview, 0.01);

    let free = fixture.problem(horizon, LinearConstraints::none(d), x0.clone(), w0.clone())?;
    let free_solution = solve_nominal(&free, &SolveOptions::default())?;
    let peak = free_solution
        .trajectory
        .u
        .iter()
        .map(max_abs_vec)
        .fold(0.0, f64::max);
    let mut last = None;
    for fraction in BOUND_FRACTIONS {
        let constraints = coupled_box_constraints(d, fraction * peak.max(1e-3), seed)?;
        let problem = fixture.problem(horizon, constraints, x0.clone(), w0.clone())?;
        let nominal = solve_nominal(&problem, &SolveOptions::default())?;
        if !nominal.is_optimal {
            return Err(EneError::SolveFailed {
                best_kkt_norm: nominal.kkt_norm,
            });
        }
        let saturated = nominal.trajectory.active.iter().any(|a| !a.is_empty());
        last = Some((problem, nominal));
        if saturated {
            break;
        }
    }
    let (problem, nominal) = last.expect("at least one bound fraction");
    Ok(FixtureCase {
        seed,
        fixture,
        problem,
        nominal,
        dx0,
        dw0,
    })
}

/// The recursion's prediction next to the oracle's minimizer.
#[derive(Debug, Clone)]
pub struct Agreement {
    pub recursion: PerturbationTrajectory,
    pub oracle: StackedQpSolution,
    pub gains: GainSchedule,
    /// Largest componentwise difference over `δx`, `δu` and `δw`.
    pub max_difference: f64,
}

fn max_sequence_difference(a: &[Vector], b: &[Vector]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| if x.len() == y.len() { max_abs_vec(&(x - y)) } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

/// Run the extended recursion around the case's nominal and solve the same
/// perturbation problem as one dense QP with the nominal's active sets.
pub fn recursion_vs_oracle(case: &FixtureCase) -> Result<Agreement> {
    let traj = &case.nominal.trajectory;
    let seg = segment_model(&case.problem, traj, RecursionMode::Optimal, GainVariant::Extended)?;
    let recursion = propagate_perturbation(&seg.linearization, &seg.gains, &case.dx0, &case.dw0)?;
    let blocks = hamiltonian_blocks_from(&case.problem, traj, &seg.costates)?;
    let oracle = solve_stacked_qp(
        &seg.linearization,
        &blocks,
        &traj.active,
        &case.dx0,
        &case.dw0,
        QpLinearTerms::default(),
    )?;
    let max_difference = max_sequence_difference(&recursion.dx, &oracle.dx)
        .max(max_sequence_difference(&recursion.du, &oracle.du))
        .max(max_sequence_difference(&recursion.dw, &oracle.dw));
    Ok(Agreement {
        recursion,
        oracle,
        gains: seg.gains,
        max_difference,
    })
}

/// Probes scattered around the states, controls and previews of a trajectory.
pub fn trajectory_probes(trajectory: &Trajectory, radius: f64, seed: u64) -> Vec<Probe> {
    let mut rng = Lcg::new(seed);
    (0..trajectory.horizon())
        .map(|k| Probe {
            x: trajectory.x[k].map(|c| c + rng.uniform(-radius, radius)),
            u: trajectory.u[k].map(|c| c + rng.uniform(-radius, radius)),
            w: trajectory.w[k].map(|c| c + rng.uniform(-radius, radius)),
        })
        .collect()
}

pub fn check_problem_derivatives(problem: &OcpProblem, probes: &[Probe], fd_step: f64) -> DerivativeReport {
    verify_derivatives(
        problem.model.as_ref(),
        problem.constraints.as_ref(),
        problem.cost.as_ref(),
        probes,
        fd_step,
    )
}

/// Gradient of the Hamiltonian over `[x; u; w]` with fixed multipliers.
fn hamiltonian_gradient(
    problem: &OcpProblem,
    z: &Vector,
    lambda: &Vector,
    lambda_bar: &Vector,
    mu_full: &Vector,
) -> Result<Vector> {
    let d = problem.dims();
    let (x, u, w) = d.split_stage(z);
    let f = problem.model.dynamics_jacobians(&x, &u, &w)?;
    let g = problem.model.preview_jacobians(&x, &w)?;
    let c = problem.constraints.jacobians(&x, &u, &w)?;
    let grad_x = f.fx.transpose() * lambda + g.gx.transpose() * lambda_bar + c.cx.transpose() * mu_full;
    let grad_u = f.fu.transpose() * lambda + c.cu.transpose() * mu_full;
    let grad_w = f.fw.transpose() * lambda + g.gw.transpose() * lambda_bar + c.cw.transpose() * mu_full;
    Ok(problem.cost.stage_gradient(&x, &u, &w)? + concat(&[&grad_x, &grad_u, &grad_w]))
}

/// Relative error between each step's Hamiltonian Hessian and a central
/// difference of the Hamiltonian gradient, at the probe points (one probe per
/// step, costates held at their nominal values). Returns the worst error.
pub fn hamiltonian_hessian_error(
    problem: &OcpProblem,
    costates: &CostateTrajectory,
    active: &[Vec<usize>],
    probes: &[Probe],
    fd_step: f64,
) -> Result<f64> {
    if probes.len() > active.len() {
        return Err(EneError::InvalidInput("more probes than horizon steps".into()));
    }
    let count = problem.constraints.count();
    let horizon = probes.len();
    let probe_traj = Trajectory {
        x: probes.iter().map(|p| p.x.clone()).chain([probes[horizon - 1].x.clone()]).collect(),
        u: probes.iter().map(|p| p.u.clone()).collect(),
        w: probes.iter().map(|p| p.w.clone()).chain([probes[horizon - 1].w.clone()]).collect(),
        active: active[..horizon].to_vec(),
    };
    let sliced = CostateTrajectory {
        lambda: costates.lambda[..=horizon].to_vec(),
        lambda_bar: costates.lambda_bar[..=horizon].to_vec(),
        mu: costates.mu[..horizon].to_vec(),
        h_u: costates.h_u[..horizon].to_vec(),
    };
    let blocks = hamiltonian_blocks_from(problem, &probe_traj, &sliced)?;
    let mut worst = 0.0f64;
    for (k, probe) in probes.iter().enumerate() {
        let mu = sliced.mu_full(k, &active[k], count);
        let z = concat(&[&probe.x, &probe.u, &probe.w]);
        let reference = fd_jacobian(
            |z| {
                hamiltonian_gradient(problem, z, &sliced.lambda[k + 1], &sliced.lambda_bar[k + 1], &mu)
                    .unwrap_or_else(|_| Vector::from_element(z.len(), f64::NAN))
            },
            &z,
            fd_step,
        )?;
        let err = max_abs(&(&blocks.stages[k] - &reference)) / max_abs(&reference).max(1e-3);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(worst)
}

/// Largest deviation from `S = Sᵀ`, `W̄ = W̄ᵀ` and `S̄ = Wᵀ` over the horizon.
pub fn value_symmetry_error(gains: &GainSchedule) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..gains.value_xx.len() {
        worst = worst
            .max(asymmetry(&gains.value_xx[k]))
            .max(asymmetry(&gains.value_ww[k]))
            .max(max_abs(&(&gains.value_wx[k] - gains.value_xw[k].transpose())));
    }
    worst
}

/// One line of a check report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckItem {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }

    fn failed(name: impl Into<String>, reason: &EneError) -> Self {
        Self {
            name: format!("{}: {reason}", name.into()),
            value: f64::INFINITY,
            tolerance: 0.0,
            passed: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckItem> {
        self.items.iter().find(|i| !i.passed)
    }
}

pub const ORACLE_TOL: f64 = 1e-6;
pub const SYMMETRY_TOL: f64 = 1e-7;
pub const HESSIAN_TOL: f64 = 1e-4;
pub const HESSIAN_PROBES: usize = 20;

/// Everything `check` runs: derivative suppliers on the scenario and the
/// fixtures, Hessian blocks against differenced gradients, the fixture
/// sweep against the QP oracle, and value-block symmetry.
pub fn run_checks(spec: &ScenarioSpec, fd_step: f64) -> CheckReport {
    let mut items = Vec::new();
    let scenario = (|| -> Result<(OcpProblem, NominalSolution)> {
        let problem = spec.problem()?;
        let nominal = solve_nominal(&problem, &SolveOptions::default())?;
        Ok((problem, nominal))
    })();
    match scenario {
        Ok((problem, nominal)) => {
            let traj = &nominal.trajectory;
            let probes = trajectory_probes(traj, 0.05, 7);
            let report = check_problem_derivatives(&problem, &probes, fd_step);
            for c in &report.checks {
                items.push(CheckItem::new(
                    format!("{} derivative {}", spec.name, c.supplier),
                    c.max_relative_error,
                    report.tolerance,
                ));
            }
            let hessian_probes = &probes[..HESSIAN_PROBES.min(probes.len())];
            match hamiltonian_hessian_error(&problem, &nominal.costates, &traj.active, hessian_probes, fd_step) {
                Ok(e) => items.push(CheckItem::new(format!("{} Hamiltonian Hessian", spec.name), e, HESSIAN_TOL)),
                Err(e) => items.push(CheckItem::failed(format!("{} Hamiltonian Hessian", spec.name), &e)),
            }
            match segment_model(&problem, traj, RecursionMode::Optimal, GainVariant::Extended) {
                Ok(seg) => items.push(CheckItem::new(
                    format!("{} value-block symmetry", spec.name),
                    value_symmetry_error(&seg.gains),
                    SYMMETRY_TOL,
                )),
                Err(e) => items.push(CheckItem::failed(format!("{} value-block symmetry", spec.name), &e)),
            }
        }
        Err(e) => items.push(CheckItem::failed(format!("{} nominal solve", spec.name), &e)),
    }

    for seed in FIXTURE_SEEDS {
        let name = format!("fixture {seed}");
        let case = match fixture_case(seed) {
            Ok(c) => c,
            Err(e) => {
                items.push(CheckItem::failed(name, &e));
                continue;
            }
        };
        let probes = trajectory_probes(&case.nominal.trajectory, 0.5, seed);
        let report = check_problem_derivatives(&case.problem, &probes, fd_step);
        let worst = report.worst().map_or(0.0, |c| c.max_relative_error);
        items.push(CheckItem::new(format!("{name} derivatives"), worst, report.tolerance));
        match recursion_vs_oracle(&case) {
            Ok(a) => {
                items.push(CheckItem::new(format!("{name} oracle agreement"), a.max_difference, ORACLE_TOL));
                items.push(CheckItem::new(format!("{name} value-block symmetry"), value_symmetry_error(&a.gains), SYMMETRY_TOL));
            }
            Err(e) => items.push(CheckItem::failed(format!("{name} oracle agreement"), &e)),
        }
    }
    CheckReport { items }
}
