//! The horizon-N constrained problem, rollouts, KKT residuals and the
//! nominal solver.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::costates::{costates_from_linearization, CostateTrajectory};
use crate::ene::{hamiltonian_blocks_from, riccati_backward, GainSchedule, GainVariant, RecursionMode, RiccatiOptions};
use crate::error::{EneError, Result};
use crate::model::{
    active_indices, ConstraintJacobians, ConstraintSet, CostSpec, Dims, DynamicsJacobians, PlantModel,
    PreviewJacobians, PreviewSignal,
};
use crate::numerics::{select_entries, select_rows, solve_symmetric_indefinite, Mat, Vector};

/// `min Σ φ + ψ` subject to the plant, preview model and `C ≤ 0`.
#[derive(Clone)]
pub struct OcpProblem {
    pub horizon: usize,
    pub model: Arc<dyn PlantModel>,
    pub constraints: Arc<dyn ConstraintSet>,
    pub cost: Arc<dyn CostSpec>,
    pub x0: Vector,
    pub w0: Vector,
}

impl fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OcpProblem")
            .field("horizon", &self.horizon)
            .field("dims", &self.model.dims())
            .field("constraints", &self.constraints.count())
            .field("x0", &self.x0.as_slice())
            .field("w0", &self.w0.as_slice())
            .finish()
    }
}

impl OcpProblem {
    pub fn new(
        horizon: usize,
        model: Arc<dyn PlantModel>,
        constraints: Arc<dyn ConstraintSet>,
        cost: Arc<dyn CostSpec>,
        x0: Vector,
        w0: Vector,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(EneError::InvalidInput("horizon must be at least 1".into()));
        }
        let d = model.dims();
        if x0.len() != d.state || w0.len() != d.preview {
            return Err(EneError::DimensionMismatch(format!(
                "initial condition sizes {}/{} do not match model dims {}/{}",
                x0.len(),
                w0.len(),
                d.state,
                d.preview
            )));
        }
        if x0.iter().chain(w0.iter()).any(|v| !v.is_finite()) {
            return Err(EneError::NonFinite {
                context: "initial condition".into(),
            });
        }
        Ok(Self {
            horizon,
            model,
            constraints,
            cost,
            x0,
            w0,
        })
    }

    pub fn dims(&self) -> Dims {
        self.model.dims()
    }

    /// Same problem from a different initial condition and horizon.
    pub fn restarted(&self, horizon: usize, x0: Vector, w0: Vector) -> Result<Self> {
        Self::new(
            horizon,
            self.model.clone(),
            self.constraints.clone(),
            self.cost.clone(),
            x0,
            w0,
        )
    }
}

/// Horizon-indexed state, control and preview sequences with per-step
/// active constraint indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub w: Vec<Vector>,
    pub active: Vec<Vec<usize>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Drop the first `steps` entries (shrinking-horizon tail).
    pub fn tail(&self, steps: usize) -> Trajectory {
        Trajectory {
            x: self.x[steps..].to_vec(),
            u: self.u[steps..].to_vec(),
            w: self.w[steps..].to_vec(),
            active: self.active[steps..].to_vec(),
        }
    }
}

fn check_finite(v: &Vector, what: &str, k: usize) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(EneError::NonFinite {
            context: format!("{what} at step {k}"),
        })
    }
}

/// Propagate the plant from `(x0, w0)` under `controls`. With a preview
/// override, `w(k)` comes from the override instead of the nominal model.
/// Active sets are taken from the constraint values.
pub fn rollout(problem: &OcpProblem, controls: &[Vector], preview_override: Option<&PreviewSignal>) -> Result<Trajectory> {
    rollout_from(problem, &problem.x0, &problem.w0, controls, preview_override)
}

pub fn rollout_from(
    problem: &OcpProblem,
    x0: &Vector,
    w0: &Vector,
    controls: &[Vector],
    preview_override: Option<&PreviewSignal>,
) -> Result<Trajectory> {
    let n = problem.horizon;
    if controls.len() != n {
        return Err(EneError::DimensionMismatch(format!(
            "{} controls for horizon {n}",
            controls.len()
        )));
    }
    let d = problem.dims();
    if let Some(bad) = controls.iter().find(|u| u.len() != d.control) {
        return Err(EneError::DimensionMismatch(format!("control of length {}", bad.len())));
    }
    let measured = match preview_override {
        Some(PreviewSignal::Generator(gen)) => Some(gen.sequence(n + 1)?),
        _ => None,
    };
    let model = problem.model.as_ref();
    let mut x = Vec::with_capacity(n + 1);
    let mut w = Vec::with_capacity(n + 1);
    x.push(x0.clone());
    w.push(match &measured {
        Some(seq) => seq[0].clone(),
        None => w0.clone(),
    });
    let tol = problem.constraints.activation_tol();
    let mut active = Vec::with_capacity(n);
    for k in 0..n {
        let (xk, wk, uk) = (&x[k], &w[k], &controls[k]);
        let rows = active_indices(problem.constraints.as_ref(), xk, uk, wk, tol).map_err(|e| match e {
            EneError::TooManyActive { count, control_dim, .. } => EneError::TooManyActive {
                step: k,
                count,
                control_dim,
            },
            other => other,
        })?;
        active.push(rows);
        let next_x = model.dynamics(xk, uk, wk);
        check_finite(&next_x, "state", k + 1)?;
        let next_w = match (&measured, preview_override) {
            (Some(seq), _) => seq[k + 1].clone(),
            (None, Some(PreviewSignal::HoldConstant)) => wk.clone(),
            _ => model.preview(xk, wk),
        };
        check_finite(&next_w, "preview", k + 1)?;
        x.push(next_x);
        w.push(next_w);
    }
    Ok(Trajectory {
        x,
        u: controls.to_vec(),
        w,
        active,
    })
}

/// `Σ φ(k) + ψ(N)`.
pub fn evaluate_cost(problem: &OcpProblem, trajectory: &Trajectory) -> f64 {
    let cost = problem.cost.as_ref();
    let n = trajectory.horizon();
    let stage: f64 = (0..n)
        .map(|k| cost.stage(&trajectory.x[k], &trajectory.u[k], &trajectory.w[k]))
        .sum();
    stage + cost.terminal(&trajectory.x[n], &trajectory.w[n])
}

/// First derivatives at one step of a trajectory.
#[derive(Debug, Clone)]
pub struct StepLinearization {
    pub dynamics: DynamicsJacobians,
    pub preview: PreviewJacobians,
    pub constraints: ConstraintJacobians,
    pub constraint_values: Vector,
    /// Stage-cost gradient over `[x; u; w]`.
    pub cost_gradient: Vector,
    pub dims: Dims,
}

impl StepLinearization {
    pub fn phi_x(&self) -> Vector {
        self.cost_gradient.rows(0, self.dims.state).into_owned()
    }

    pub fn phi_u(&self) -> Vector {
        self.cost_gradient.rows(self.dims.state, self.dims.control).into_owned()
    }

    pub fn phi_w(&self) -> Vector {
        self.cost_gradient
            .rows(self.dims.state + self.dims.control, self.dims.preview)
            .into_owned()
    }
}

/// Derivatives along a whole trajectory.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub dims: Dims,
    pub steps: Vec<StepLinearization>,
    /// Terminal-cost gradient over `[x; w]`.
    pub terminal_gradient: Vector,
    /// Terminal-cost Hessian over `[x; w]`.
    pub terminal_hessian: Mat,
}

impl Linearization {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn psi_x(&self) -> Vector {
        self.terminal_gradient.rows(0, self.dims.state).into_owned()
    }

    pub fn psi_w(&self) -> Vector {
        self.terminal_gradient.rows(self.dims.state, self.dims.preview).into_owned()
    }

    pub fn psi_xx(&self) -> Mat {
        let n = self.dims.state;
        self.terminal_hessian.view((0, 0), (n, n)).into_owned()
    }

    pub fn psi_ww(&self) -> Mat {
        let (n, p) = (self.dims.state, self.dims.preview);
        self.terminal_hessian.view((n, n), (p, p)).into_owned()
    }
}

pub fn linearize(problem: &OcpProblem, trajectory: &Trajectory) -> Result<Linearization> {
    let d = problem.dims();
    let n = trajectory.horizon();
    if trajectory.x.len() != n + 1 || trajectory.w.len() != n + 1 {
        return Err(EneError::DimensionMismatch("trajectory sequences have inconsistent lengths".into()));
    }
    let model = problem.model.as_ref();
    let constraints = problem.constraints.as_ref();
    let cost = problem.cost.as_ref();
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        let (x, u, w) = (&trajectory.x[k], &trajectory.u[k], &trajectory.w[k]);
        steps.push(StepLinearization {
            dynamics: model.dynamics_jacobians(x, u, w)?,
            preview: model.preview_jacobians(x, w)?,
            constraints: constraints.jacobians(x, u, w)?,
            constraint_values: constraints.eval(x, u, w),
            cost_gradient: cost.stage_gradient(x, u, w)?,
            dims: d,
        });
    }
    Ok(Linearization {
        dims: d,
        steps,
        terminal_gradient: cost.terminal_gradient(&trajectory.x[n], &trajectory.w[n])?,
        terminal_hessian: cost.terminal_hessian(&trajectory.x[n], &trajectory.w[n])?,
    })
}

/// Per-step KKT diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktResidual {
    pub h_u: Vec<Vector>,
    /// `‖H_u(k)‖∞`.
    pub stationarity: Vec<f64>,
    /// `max |μᵢ Cᵢ|` over active rows.
    pub complementarity: Vec<f64>,
    /// `max(0, max Cᵢ)`.
    pub infeasibility: Vec<f64>,
    /// Smallest active multiplier (`+∞` when nothing is active).
    pub min_multiplier: Vec<f64>,
}

impl KktResidual {
    pub fn kkt_norm(&self) -> f64 {
        self.stationarity.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_infeasibility(&self) -> f64 {
        self.infeasibility.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_complementarity(&self) -> f64 {
        self.complementarity.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_multiplier(&self) -> f64 {
        self.min_multiplier.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn kkt_residual(problem: &OcpProblem, trajectory: &Trajectory, costates: &CostateTrajectory) -> KktResidual {
    let n = trajectory.horizon();
    let constraints = problem.constraints.as_ref();
    let mut out = KktResidual {
        h_u: costates.h_u.clone(),
        stationarity: costates.h_u.iter().map(|h| h.amax()).collect(),
        complementarity: Vec::with_capacity(n),
        infeasibility: Vec::with_capacity(n),
        min_multiplier: Vec::with_capacity(n),
    };
    for k in 0..n {
        let c = constraints.eval(&trajectory.x[k], &trajectory.u[k], &trajectory.w[k]);
        let rows = &trajectory.active[k];
        let mu = &costates.mu[k];
        let comp = rows
            .iter()
            .zip(mu.iter())
            .map(|(&i, &m)| (m * c[i]).abs())
            .fold(0.0, f64::max);
        out.complementarity.push(comp);
        out.infeasibility.push(c.iter().copied().fold(0.0, f64::max));
        out.min_multiplier.push(mu.iter().copied().fold(f64::INFINITY, f64::min));
    }
    out
}

/// A nominal trajectory with its multipliers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NominalSolution {
    pub trajectory: Trajectory,
    pub costates: CostateTrajectory,
    pub kkt_norm: f64,
    pub is_optimal: bool,
    pub cost: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub opt_tol: f64,
    pub init_controls: Option<Vec<Vector>>,
    /// A trajectory near the expected solution, possibly starting elsewhere.
    /// The first iterate tracks it with feedback gains computed around it.
    /// Takes precedence over `init_controls`.
    pub init_reference: Option<Trajectory>,
    /// Multipliers below `−multiplier_tol` are released at convergence.
    pub multiplier_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            opt_tol: 1e-6,
            init_controls: None,
            init_reference: None,
            multiplier_tol: 1e-9,
        }
    }
}

/// Move `u` onto `C_rows = 0` with the least-norm correction, iterating for
/// constraints that are not affine in `u`.
fn project_control(
    constraints: &dyn ConstraintSet,
    x: &Vector,
    u: &Vector,
    w: &Vector,
    rows: &[usize],
) -> Result<Vector> {
    let mut u = u.clone();
    for _ in 0..20 {
        let c = select_entries(&constraints.eval(x, &u, w), rows);
        if c.amax() <= 1e-13 {
            break;
        }
        let cu = select_rows(&constraints.jacobians(x, &u, w)?.cu, rows);
        let gram = &cu * cu.transpose();
        let rhs = Mat::from_column_slice(rows.len(), 1, c.as_slice());
        let y = solve_symmetric_indefinite(&gram, &rhs)?;
        u -= cu.transpose() * y.column(0);
        if constraints.affine() {
            break;
        }
    }
    Ok(u)
}

/// Forward pass of the nominal solver: apply the Newton step with feedback
/// on the deviation from the previous iterate, then project any newly
/// violated rows onto the constraint boundary and add them to the active set.
fn forward_pass(
    problem: &OcpProblem,
    base: &Trajectory,
    gains: &GainSchedule,
    step: f64,
) -> Result<Trajectory> {
    let n = problem.horizon;
    let d = problem.dims();
    let model = problem.model.as_ref();
    let constraints = problem.constraints.as_ref();
    let tol = constraints.activation_tol();
    let mut x = vec![problem.x0.clone()];
    let mut w = vec![problem.w0.clone()];
    let mut u = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    for k in 0..n {
        let g = &gains.steps[k];
        let dx = &x[k] - &base.x[k];
        let dw = &w[k] - &base.w[k];
        let mut uk = &base.u[k] + &g.feedforward * step + &g.k1 * dx + &g.k2 * dw;
        let mut rows = base.active[k].clone();
        let c = constraints.eval(&x[k], &uk, &w[k]);
        let violated: Vec<usize> = (0..c.len()).filter(|&i| c[i] > tol && !rows.contains(&i)).collect();
        if !violated.is_empty() || (!rows.is_empty() && !constraints.affine()) {
            rows.extend(violated);
            rows.sort_unstable();
            if rows.len() > d.control {
                return Err(EneError::TooManyActive {
                    step: k,
                    count: rows.len(),
                    control_dim: d.control,
                });
            }
            uk = project_control(constraints, &x[k], &uk, &w[k], &rows)?;
        }
        check_finite(&uk, "control", k)?;
        let next_x = model.dynamics(&x[k], &uk, &w[k]);
        check_finite(&next_x, "state", k + 1)?;
        let next_w = model.preview(&x[k], &w[k]);
        x.push(next_x);
        w.push(next_w);
        u.push(uk);
        active.push(rows);
    }
    Ok(Trajectory { x, u, w, active })
}

/// Initial iterate: roll out the given controls, projecting any violated
/// constraint onto its boundary.
fn initial_iterate(problem: &OcpProblem, controls: &[Vector]) -> Result<Trajectory> {
    let n = problem.horizon;
    let d = problem.dims();
    let model = problem.model.as_ref();
    let constraints = problem.constraints.as_ref();
    let tol = constraints.activation_tol();
    let mut x = vec![problem.x0.clone()];
    let mut w = vec![problem.w0.clone()];
    let mut u = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    for k in 0..n {
        let mut uk = controls[k].clone();
        let c = constraints.eval(&x[k], &uk, &w[k]);
        let mut rows: Vec<usize> = (0..c.len()).filter(|&i| c[i] >= -tol).collect();
        rows.truncate(d.control);
        if rows.iter().any(|&i| c[i] > tol) {
            uk = project_control(constraints, &x[k], &uk, &w[k], &rows)?;
        }
        let next_x = model.dynamics(&x[k], &uk, &w[k]);
        check_finite(&next_x, "state", k + 1)?;
        w.push(model.preview(&x[k], &w[k]));
        x.push(next_x);
        u.push(uk);
        active.push(rows);
    }
    Ok(Trajectory { x, u, w, active })
}

/// Roll out from the problem's initial condition with feedback on the
/// deviation from `reference`.
fn tracking_iterate(problem: &OcpProblem, reference: &Trajectory) -> Result<Trajectory> {
    if reference.horizon() != problem.horizon {
        return Err(EneError::DimensionMismatch(format!(
            "reference of horizon {} for problem horizon {}",
            reference.horizon(),
            problem.horizon
        )));
    }
    let lin = linearize(problem, reference)?;
    let costates = costates_from_linearization(&lin, &reference.active)?;
    let mut regularization = 0.0;
    let gains = loop {
        match newton_gains(problem, reference, &lin, &costates, regularization) {
            Ok(g) => break g,
            Err(EneError::ZuuNotPositive { .. }) | Err(EneError::SingularKkt { .. }) if regularization < 1e10 => {
                regularization = if regularization == 0.0 { 1e-6 } else { regularization * 10.0 };
            }
            Err(e) => return Err(e),
        }
    };
    forward_pass(problem, reference, &gains, 0.0)
}

fn newton_gains(
    problem: &OcpProblem,
    trajectory: &Trajectory,
    lin: &Linearization,
    costates: &CostateTrajectory,
    regularization: f64,
) -> Result<GainSchedule> {
    let blocks = hamiltonian_blocks_from(problem, trajectory, costates)?;
    riccati_backward(
        lin,
        &blocks,
        &trajectory.active,
        costates,
        &RiccatiOptions {
            mode: RecursionMode::NonOptimal,
            variant: GainVariant::Extended,
            regularization,
            restore_constraints: true,
        },
    )
}

/// Solve the nominal problem by iterating the modified-ENE Newton step.
///
/// Each iteration computes costates and the Hamiltonian Hessian on the
/// current active set, runs the non-optimal Riccati sweep (whose feedforward
/// is a constrained Newton step), and line-searches on total cost. Rows that
/// a step would violate are projected to the boundary and activated; once the
/// active-set subproblem is stationary, the most negative multiplier per step
/// is released. A Levenberg shift on `Z_uu` is used only inside this solver.
pub fn solve_nominal(problem: &OcpProblem, opts: &SolveOptions) -> Result<NominalSolution> {
    let n = problem.horizon;
    let d = problem.dims();
    let init: Vec<Vector> = match &opts.init_controls {
        Some(u) if u.len() == n => u.clone(),
        Some(u) => {
            return Err(EneError::DimensionMismatch(format!(
                "{} initial controls for horizon {n}",
                u.len()
            )))
        }
        None => vec![Vector::zeros(d.control); n],
    };
    let mut traj = match &opts.init_reference {
        Some(reference) => tracking_iterate(problem, reference)?,
        None => initial_iterate(problem, &init)?,
    };
    let mut cost = evaluate_cost(problem, &traj);
    let mut regularization = 0.0_f64;
    let mut best_kkt = f64::INFINITY;

    let finish = |traj: Trajectory, costates: CostateTrajectory, cost: f64, iterations: usize, optimal: bool| {
        let kkt_norm = costates.stationarity_norm();
        NominalSolution {
            trajectory: traj,
            costates,
            kkt_norm,
            is_optimal: optimal,
            cost,
            iterations,
        }
    };

    let mut iteration = 0;
    loop {
        let lin = linearize(problem, &traj)?;
        let costates = costates_from_linearization(&lin, &traj.active)?;
        let kkt = costates.stationarity_norm();
        best_kkt = best_kkt.min(kkt);

        if kkt <= opts.opt_tol {
            let mut released = false;
            for k in 0..n {
                let mu = &costates.mu[k];
                if let Some((j, &v)) = mu.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                    if v < -opts.multiplier_tol {
                        traj.active[k].remove(j);
                        released = true;
                    }
                }
            }
            if !released {
                let feasible = residual_is_feasible(problem, &traj);
                return Ok(finish(traj, costates, cost, iteration, feasible));
            }
            if iteration >= opts.max_iters {
                return Err(EneError::SolveFailed { best_kkt_norm: best_kkt });
            }
            iteration += 1;
            continue;
        }
        if iteration >= opts.max_iters {
            if opts.max_iters == 0 {
                return Ok(finish(traj, costates, cost, 0, false));
            }
            return Err(EneError::SolveFailed { best_kkt_norm: best_kkt });
        }
        iteration += 1;

        let gains = loop {
            match newton_gains(problem, &traj, &lin, &costates, regularization) {
                Ok(g) => break g,
                Err(EneError::ZuuNotPositive { step }) | Err(EneError::SingularKkt { step }) => {
                    regularization = if regularization == 0.0 { 1e-6 } else { regularization * 10.0 };
                    if regularization > 1e10 {
                        return Err(EneError::ZuuNotPositive { step });
                    }
                }
                Err(e) => return Err(e),
            }
        };

        let slope: f64 = (0..n).map(|k| costates.h_u[k].dot(&gains.steps[k].feedforward)).sum();
        let mut accepted = None;
        let mut step = 1.0;
        for _ in 0..=10 {
            if let Ok(candidate) = forward_pass(problem, &traj, &gains, step) {
                let c = evaluate_cost(problem, &candidate);
                let armijo = if slope < 0.0 { 1e-4 * step * slope } else { 0.0 };
                if c.is_finite() && c <= cost + armijo {
                    accepted = Some((candidate, c));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((candidate, c)) => {
                traj = candidate;
                cost = c;
                if step == 1.0 {
                    regularization = if regularization <= 1e-6 { 0.0 } else { regularization / 10.0 };
                }
            }
            None => {
                regularization = if regularization == 0.0 { 1e-4 } else { regularization * 10.0 };
                if regularization > 1e10 {
                    return Err(EneError::SolveFailed { best_kkt_norm: best_kkt });
                }
            }
        }
    }
}

fn residual_is_feasible(problem: &OcpProblem, traj: &Trajectory) -> bool {
    let tol = problem.constraints.activation_tol();
    (0..traj.horizon()).all(|k| {
        problem
            .constraints
            .eval(&traj.x[k], &traj.u[k], &traj.w[k])
            .iter()
            .all(|&c| c <= tol)
    })
}

/// A constraint row exceeding zero by more than the reporting tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub constraint: usize,
    pub magnitude: f64,
}

pub fn constraint_violations(problem: &OcpProblem, trajectory: &Trajectory, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for k in 0..trajectory.horizon() {
        let c = problem
            .constraints
            .eval(&trajectory.x[k], &trajectory.u[k], &trajectory.w[k]);
        for (i, &v) in c.iter().enumerate() {
            if v > tol {
                out.push(Violation {
                    step: k,
                    constraint: i,
                    magnitude: v,
                });
            }
        }
    }
    out
}
