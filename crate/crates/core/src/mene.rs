//! Modified policy for non-optimal nominals and the multi-segment procedure
//! for perturbations that change constraint activity.

use serde::{Deserialize, Serialize};

use crate::costates::{costates_from_linearization, CostateTrajectory};
use crate::ene::{
    hamiltonian_blocks_from, propagate_perturbation, riccati_backward, GainSchedule, GainVariant,
    PerturbationState, PerturbationTrajectory, RecursionMode, RiccatiOptions,
};
use crate::error::{EneError, Result};
use crate::model::PreviewSignal;
use crate::numerics::{Mat, Vector};
use crate::ocp::{
    constraint_violations, linearize, Linearization, NominalSolution, OcpProblem, Trajectory, Violation,
};

/// Denominators at or below this magnitude never produce a crossing.
pub const ALPHA_DENOMINATOR_FLOOR: f64 = 1e-12;
/// Fractions below this count as no progress for cycle detection.
pub const PROGRESS_FLOOR: f64 = 1e-10;

/// `δu = K₁δx + K₂δw + K₃·[fᵤᵀT(k+1) + H_u(k); 0]`.
pub fn mene_control(gains: &GainSchedule, k: usize, pert: &PerturbationState, f_u: &Mat, h_u: &Vector) -> Vector {
    let s = &gains.steps[k];
    let m = gains.dims.control;
    let mut drive = Vector::zeros(m + s.active.len());
    drive
        .rows_mut(0, m)
        .copy_from(&(f_u.transpose() * &gains.value_x[k + 1] + h_u));
    &s.k1 * &pert.dx + &s.k2 * &pert.dw + &s.k3 * drive
}

/// Predicted `(δμ, δC)` at step `k`: `δμ = K₄δx + K₅δw` plus the drive's
/// multiplier shift (active rows only), and `δC` for every constraint row.
pub fn multiplier_and_constraint_perturbations(
    gains: &GainSchedule,
    lin: &Linearization,
    k: usize,
    pert: &PerturbationState,
) -> (Vector, Vector) {
    let s = &gains.steps[k];
    let c = &lin.steps[k].constraints;
    let dmu = &s.k4 * &pert.dx + &s.k5 * &pert.dw + &s.multiplier_feedforward;
    let dc = (&c.cx + &c.cu * &s.k1) * &pert.dx + (&c.cw + &c.cu * &s.k2) * &pert.dw + &c.cu * &s.feedforward;
    (dmu, dc)
}

/// Fraction of the perturbation at which one component changes activity.
///
/// Active rows cross when the multiplier falls to zero (`δμ < 0`), inactive
/// rows when the constraint rises to zero (`δC > 0`). Anything that does not
/// move toward its boundary, or only reaches it beyond the full step, maps
/// to 1; a component already past its boundary maps to 0.
pub fn component_alpha(value: f64, delta: f64, active: bool) -> f64 {
    let toward = if active {
        delta < -ALPHA_DENOMINATOR_FLOOR
    } else {
        delta > ALPHA_DENOMINATOR_FLOOR
    };
    if !toward {
        return 1.0;
    }
    let alpha = -value / delta;
    if alpha.is_nan() {
        1.0
    } else {
        alpha.clamp(0.0, 1.0)
    }
}

/// Smallest crossing fraction at one step and the component achieving it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAlpha {
    pub alpha: f64,
    /// `(constraint index, currently active)` for the arg-min component.
    pub blocking: Option<(usize, bool)>,
}

/// Per-step crossing fractions. `mu` holds active multipliers in active-set
/// order, `constraint_values` every row's value.
pub fn segment_alpha(
    mu: &[Vector],
    constraint_values: &[Vector],
    dmu: &[Vector],
    dc: &[Vector],
    active: &[Vec<usize>],
) -> Vec<StepAlpha> {
    (0..active.len())
        .map(|k| {
            let mut best = StepAlpha {
                alpha: 1.0,
                blocking: None,
            };
            let rows = &active[k];
            for i in 0..constraint_values[k].len() {
                let a = match rows.iter().position(|&r| r == i) {
                    Some(j) => component_alpha(mu[k][j], dmu[k][j], true),
                    None => component_alpha(constraint_values[k][i], dc[k][i], false),
                };
                if a < best.alpha {
                    best = StepAlpha {
                        alpha: a,
                        blocking: Some((i, rows.contains(&i))),
                    };
                }
            }
            best
        })
        .collect()
}

/// An activity change applied at the end of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub step: usize,
    pub constraint: usize,
    /// True when the constraint became active.
    pub activated: bool,
}

/// One segment of the multi-segment procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub origin_x: Vector,
    pub origin_w: Vector,
    pub alphas: Vec<f64>,
    pub lambda: f64,
    /// Share of the original perturbation consumed by this segment.
    pub fraction_of_total: f64,
    pub flip: Option<Flip>,
    /// Control increment contributed by this segment (`λ·δu`).
    pub du: Vec<Vector>,
    pub cumulative_du_norm: f64,
}

/// Feedback law around the final segment's nominal:
/// `u = û + K₁(x − x̂) + K₂(w − ŵ) + K₃·drive`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentPolicy {
    pub nominal: Trajectory,
    pub gains: GainSchedule,
}

impl SegmentPolicy {
    pub fn control(&self, k: usize, x: &Vector, w: &Vector) -> Vector {
        let dx = x - &self.nominal.x[k];
        let dw = match self.gains.variant {
            GainVariant::Extended => w - &self.nominal.w[k],
            GainVariant::StateOnly => Vector::zeros(w.len()),
        };
        &self.nominal.u[k] + self.gains.control(k, &dx, &dw)
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOptions {
    pub max_segments: usize,
    pub variant: GainVariant,
    /// When present, the final controls are also rolled out against this
    /// preview source.
    pub actual_preview: Option<PreviewSignal>,
    pub violation_tol: f64,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            max_segments: 32,
            variant: GainVariant::Extended,
            actual_preview: None,
            violation_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationResult {
    /// `u° + Σⱼ λⱼδuⱼ`.
    pub controls: Vec<Vector>,
    /// Rollout of `controls` under the nominal plant and preview model.
    pub planned: Trajectory,
    /// Rollout against the actual preview, when one was supplied.
    pub actual: Option<Trajectory>,
    pub segments: Vec<SegmentRecord>,
    pub violations: Vec<Violation>,
    pub policy: SegmentPolicy,
}

impl AdaptationResult {
    pub fn flips(&self) -> usize {
        self.segments.iter().filter(|s| s.flip.is_some()).count()
    }

    pub fn total_fraction(&self) -> f64 {
        self.segments.iter().map(|s| s.fraction_of_total).sum()
    }
}

/// Derivatives, costates and gains around one segment nominal.
pub struct SegmentModel {
    pub linearization: Linearization,
    pub costates: CostateTrajectory,
    pub gains: GainSchedule,
}

pub fn segment_model(
    problem: &OcpProblem,
    nominal: &Trajectory,
    mode: RecursionMode,
    variant: GainVariant,
) -> Result<SegmentModel> {
    let linearization = linearize(problem, nominal)?;
    let costates = costates_from_linearization(&linearization, &nominal.active)?;
    let blocks = hamiltonian_blocks_from(problem, nominal, &costates)?;
    let gains = riccati_backward(
        &linearization,
        &blocks,
        &nominal.active,
        &costates,
        &RiccatiOptions::new(mode, variant),
    )?;
    Ok(SegmentModel {
        linearization,
        costates,
        gains,
    })
}

fn mode_for(optimal: bool) -> RecursionMode {
    if optimal {
        RecursionMode::Optimal
    } else {
        RecursionMode::NonOptimal
    }
}

/// Gains around the nominal without any segment splitting.
pub fn single_segment_policy(problem: &OcpProblem, nominal: &NominalSolution, variant: GainVariant) -> Result<SegmentPolicy> {
    let seg = segment_model(problem, &nominal.trajectory, mode_for(nominal.is_optimal), variant)?;
    Ok(SegmentPolicy {
        nominal: nominal.trajectory.clone(),
        gains: seg.gains,
    })
}

/// Walk from the nominal initial condition to the perturbed one, splitting
/// wherever a constraint's activity changes.
///
/// Each segment linearizes around its nominal, predicts the perturbation
/// response with the current gains, and finds the smallest fraction `λ` at
/// which an active multiplier or inactive constraint reaches zero. A
/// fraction of the control increment is applied, the nonlinear plant is
/// rolled out from the shifted origin to form the next nominal, and the
/// blocking constraint's activity is flipped. The first segment at an
/// optimal nominal uses the optimal recursion; later segments correct for
/// the stationarity residual of their (non-optimal) nominal.
pub fn adapt_multi_segment(
    problem: &OcpProblem,
    nominal: &NominalSolution,
    dx0: &Vector,
    dw0: &Vector,
    opts: &AdaptOptions,
) -> Result<AdaptationResult> {
    let d = problem.dims();
    if dx0.len() != d.state || dw0.len() != d.preview {
        return Err(EneError::DimensionMismatch("perturbation sizes do not match the model".into()));
    }
    let horizon = nominal.trajectory.horizon();
    let dw0 = match opts.variant {
        GainVariant::Extended => dw0.clone(),
        GainVariant::StateOnly => Vector::zeros(d.preview),
    };
    let base_problem = problem.restarted(horizon, nominal.trajectory.x[0].clone(), nominal.trajectory.w[0].clone())?;

    let mut traj = nominal.trajectory.clone();
    let mut optimal = nominal.is_optimal;
    let mut rx = dx0.clone();
    let mut rw = dw0.clone();
    let mut remaining = 1.0_f64;
    let mut log: Vec<SegmentRecord> = Vec::new();
    let mut stalled: Vec<(usize, usize)> = Vec::new();
    let mut cumulative = vec![Vector::zeros(d.control); horizon];

    loop {
        if log.len() >= opts.max_segments {
            return Err(EneError::SegmentBudgetExceeded {
                budget: opts.max_segments,
                log,
            });
        }
        let seg = segment_model(&base_problem, &traj, mode_for(optimal), opts.variant)?;
        let pert = propagate_perturbation(&seg.linearization, &seg.gains, &rx, &rw)?;
        let values: Vec<Vector> = seg
            .linearization
            .steps
            .iter()
            .map(|s| s.constraint_values.clone())
            .collect();
        let alphas = segment_alpha(&seg.costates.mu, &values, &pert.dmu, &pert.dc, &traj.active);

        let mut lambda = 1.0;
        let mut blocking = None;
        for (k, a) in alphas.iter().enumerate() {
            if a.alpha < lambda {
                lambda = a.alpha;
                blocking = a.blocking.map(|(i, was_active)| (k, i, was_active));
            }
        }

        let mut next = None;
        let applied: Vec<Vector> = if blocking.is_some() && lambda > 0.0 {
            let origin_x = &traj.x[0] + &rx * lambda;
            let origin_w = &traj.w[0] + &rw * lambda;
            let tracked = track_prediction(&base_problem, &traj, &seg.gains, &pert, lambda, &origin_x, &origin_w)?;
            let applied = tracked.u.iter().zip(traj.u.iter()).map(|(a, b)| a - b).collect();
            next = Some(tracked);
            applied
        } else if blocking.is_some() {
            vec![Vector::zeros(d.control); horizon]
        } else {
            pert.du.clone()
        };
        for (acc, du) in cumulative.iter_mut().zip(applied.iter()) {
            *acc += du;
        }
        let record = |flip, fraction| SegmentRecord {
            index: log.len(),
            origin_x: traj.x[0].clone(),
            origin_w: traj.w[0].clone(),
            alphas: alphas.iter().map(|a| a.alpha).collect(),
            lambda,
            fraction_of_total: fraction,
            flip,
            du: applied.clone(),
            cumulative_du_norm: cumulative.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt(),
        };

        let Some((step, constraint, was_active)) = blocking else {
            log.push(record(None, remaining));
            return finish(problem, nominal, dx0, &dw0, log, SegmentPolicy { nominal: traj, gains: seg.gains }, opts);
        };

        if lambda >= PROGRESS_FLOOR {
            stalled.clear();
        }
        if stalled.contains(&(step, constraint)) {
            return Err(EneError::CycleDetected { step, constraint });
        }
        stalled.push((step, constraint));

        let flip = Flip {
            step,
            constraint,
            activated: !was_active,
        };
        log.push(record(Some(flip), lambda * remaining));

        let mut active = traj.active.clone();
        if let Some(tracked) = next {
            traj = tracked;
            rx *= 1.0 - lambda;
            rw *= 1.0 - lambda;
            remaining *= 1.0 - lambda;
            optimal = false;
        }
        if was_active {
            active[step].retain(|&i| i != constraint);
        } else {
            active[step].push(constraint);
            active[step].sort_unstable();
            if active[step].len() > d.control {
                return Err(EneError::TooManyActive {
                    step,
                    count: active[step].len(),
                    control_dim: d.control,
                });
            }
        }
        traj.active = active;
    }
}

/// Nonlinear rollout from the shifted origin that tracks the linear
/// prediction `nominal + λ·δ` with the segment's feedback gains. On linear
/// dynamics this reproduces the open-loop increment exactly; on unstable
/// nonlinear plants it keeps the next segment nominal near the prediction.
fn track_prediction(
    problem: &OcpProblem,
    traj: &Trajectory,
    gains: &GainSchedule,
    pert: &PerturbationTrajectory,
    lambda: f64,
    origin_x: &Vector,
    origin_w: &Vector,
) -> Result<Trajectory> {
    let model = problem.model.as_ref();
    let horizon = traj.horizon();
    let mut x = vec![origin_x.clone()];
    let mut w = vec![origin_w.clone()];
    let mut u = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let g = &gains.steps[k];
        let dx = &x[k] - (&traj.x[k] + &pert.dx[k] * lambda);
        let mut uk = &traj.u[k] + &pert.du[k] * lambda + &g.k1 * dx;
        if gains.variant == GainVariant::Extended {
            let dw = &w[k] - (&traj.w[k] + &pert.dw[k] * lambda);
            uk += &g.k2 * dw;
        }
        let next_x = model.dynamics(&x[k], &uk, &w[k]);
        if !next_x.iter().all(|v| v.is_finite()) {
            return Err(EneError::NonFinite {
                context: format!("segment rollout at step {}", k + 1),
            });
        }
        w.push(model.preview(&x[k], &w[k]));
        x.push(next_x);
        u.push(uk);
    }
    Ok(Trajectory {
        x,
        u,
        w,
        active: traj.active.clone(),
    })
}

/// Closed-loop rollout of a policy. Without a preview signal the nominal
/// preview model drives `w`.
pub fn rollout_policy(
    problem: &OcpProblem,
    policy: &SegmentPolicy,
    x0: &Vector,
    w0: &Vector,
    preview: Option<&PreviewSignal>,
) -> Result<Trajectory> {
    let model = problem.model.as_ref();
    let horizon = policy.gains.horizon();
    let measured = match preview {
        Some(PreviewSignal::Generator(g)) => Some(g.sequence(horizon + 1)?),
        _ => None,
    };
    let mut x = vec![x0.clone()];
    let mut w = vec![measured.as_ref().map_or_else(|| w0.clone(), |m| m[0].clone())];
    let mut u = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let uk = policy.control(k, &x[k], &w[k]);
        let next_x = model.dynamics(&x[k], &uk, &w[k]);
        if !next_x.iter().all(|v| v.is_finite()) {
            return Err(EneError::NonFinite {
                context: format!("policy rollout at step {}", k + 1),
            });
        }
        let next_w = match (&measured, preview) {
            (Some(m), _) => m[k + 1].clone(),
            (None, Some(PreviewSignal::HoldConstant)) => w[k].clone(),
            _ => model.preview(&x[k], &w[k]),
        };
        x.push(next_x);
        w.push(next_w);
        u.push(uk);
    }
    let active = (0..horizon)
        .map(|k| {
            let c = problem.constraints.eval(&x[k], &u[k], &w[k]);
            let tol = problem.constraints.activation_tol();
            (0..c.len()).filter(|&i| c[i] >= -tol).collect()
        })
        .collect();
    Ok(Trajectory { x, u, w, active })
}

fn finish(
    problem: &OcpProblem,
    nominal: &NominalSolution,
    dx0: &Vector,
    dw0: &Vector,
    segments: Vec<SegmentRecord>,
    policy: SegmentPolicy,
    opts: &AdaptOptions,
) -> Result<AdaptationResult> {
    let x0 = &nominal.trajectory.x[0] + dx0;
    let w0 = &nominal.trajectory.w[0] + dw0;
    let planned = rollout_policy(problem, &policy, &x0, &w0, None)?;
    let actual = match &opts.actual_preview {
        Some(signal) => Some(rollout_policy(problem, &policy, &x0, &w0, Some(signal))?),
        None => None,
    };
    let violations = constraint_violations(problem, actual.as_ref().unwrap_or(&planned), opts.violation_tol);
    Ok(AdaptationResult {
        controls: planned.u.clone(),
        planned,
        actual,
        segments,
        violations,
        policy,
    })
}

/// Receding-horizon use: treat the previous plan's tail as a non-optimal
/// nominal and adapt it to the measured state and preview. Returns the
/// control to apply now and the new plan.
pub fn closed_loop_mene_step(
    problem: &OcpProblem,
    previous: &AdaptationResult,
    measured_x: &Vector,
    measured_w: &Vector,
    opts: &AdaptOptions,
) -> Result<(Vector, AdaptationResult)> {
    let horizon = previous.planned.horizon();
    if horizon < 2 {
        return Err(EneError::InvalidInput("previous plan has no remaining horizon".into()));
    }
    let tail = previous.planned.tail(1);
    let shifted = problem.restarted(horizon - 1, tail.x[0].clone(), tail.w[0].clone())?;
    let lin = linearize(&shifted, &tail)?;
    let costates = costates_from_linearization(&lin, &tail.active)?;
    let kkt_norm = costates.stationarity_norm();
    let cost = crate::ocp::evaluate_cost(&shifted, &tail);
    let nominal = NominalSolution {
        trajectory: tail,
        costates,
        kkt_norm,
        is_optimal: false,
        cost,
        iterations: 0,
    };
    let dx = measured_x - &nominal.trajectory.x[0];
    let dw = measured_w - &nominal.trajectory.w[0];
    let result = adapt_multi_segment(&shifted, &nominal, &dx, &dw, opts)?;
    Ok((result.controls[0].clone(), result))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplier_reaching_zero_halfway() {
        assert_eq!(component_alpha(2.0, -4.0, true), 0.5);
    }

    #[test]
    fn distant_constraint_maps_to_full_step() {
        assert_eq!(component_alpha(-300.0, 100.0, false), 1.0);
    }

    #[test]
    fn zero_denominator_never_blocks() {
        assert_eq!(component_alpha(2.0, 0.0, true), 1.0);
        assert_eq!(component_alpha(-1.0, 1e-13, false), 1.0);
    }

    #[test]
    fn moving_away_from_boundary_never_blocks() {
        assert_eq!(component_alpha(2.0, 4.0, true), 1.0);
        assert_eq!(component_alpha(-1.0, -5.0, false), 1.0);
    }

    #[test]
    fn already_past_boundary_blocks_immediately() {
        assert_eq!(component_alpha(-0.5, -1.0, true), 0.0);
        assert_eq!(component_alpha(0.0, -1.0, true), 0.0);
    }

    #[test]
    fn segment_alpha_tie_breaks_on_lowest_index() {
        let mu = vec![Vector::zeros(0), Vector::zeros(0)];
        let c = vec![Vector::from_vec(vec![-1.0, -1.0]), Vector::from_vec(vec![-1.0, -2.0])];
        let dmu = mu.clone();
        let dc = vec![Vector::from_vec(vec![2.0, 2.0]), Vector::from_vec(vec![2.0, 4.0])];
        let active = vec![vec![], vec![]];
        let a = segment_alpha(&mu, &c, &dmu, &dc, &active);
        assert_eq!(a[0].alpha, 0.5);
        assert_eq!(a[0].blocking, Some((0, false)));
        assert_eq!(a[1].blocking, Some((0, false)));
    }
}
