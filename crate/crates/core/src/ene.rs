//! Second-variation machinery: Hamiltonian Hessian blocks, the backward
//! value-function recursion, the control-space KKT inverse and the
//! state/preview feedback gains.

use serde::{Deserialize, Serialize};

use crate::costates::CostateTrajectory;
use crate::error::{EneError, Result};
use crate::model::Dims;
use crate::numerics::{
    all_finite, inverse_symmetric, is_positive_definite, select_rows, symmetrize, vstack, Mat, Vector,
};
use crate::ocp::{Linearization, OcpProblem, Trajectory};

/// Which stacked coordinate a block row or column refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    State,
    Control,
    Preview,
}

impl Part {
    fn range(self, d: Dims) -> (usize, usize) {
        match self {
            Part::State => (0, d.state),
            Part::Control => (d.state, d.control),
            Part::Preview => (d.state + d.control, d.preview),
        }
    }
}

/// Second derivatives of the Hamiltonian over `[x; u; w]` at each step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HamiltonianBlocks {
    pub dims: Dims,
    pub stages: Vec<Mat>,
}

impl HamiltonianBlocks {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn block(&self, k: usize, row: Part, col: Part) -> Mat {
        let (r0, rn) = row.range(self.dims);
        let (c0, cn) = col.range(self.dims);
        self.stages[k].view((r0, c0), (rn, cn)).into_owned()
    }
}

/// `H = φ + λ'ᵀf + λ̄'ᵀg + μᵀCᵃ`, differentiated twice.
pub fn hamiltonian_blocks(
    problem: &OcpProblem,
    trajectory: &Trajectory,
    costates: &CostateTrajectory,
) -> Result<HamiltonianBlocks> {
    hamiltonian_blocks_from(problem, trajectory, costates)
}

pub fn hamiltonian_blocks_from(
    problem: &OcpProblem,
    trajectory: &Trajectory,
    costates: &CostateTrajectory,
) -> Result<HamiltonianBlocks> {
    let d = problem.dims();
    let model = problem.model.as_ref();
    let constraints = problem.constraints.as_ref();
    let l = constraints.count();
    let (n, m) = (d.state, d.control);
    let mut stages = Vec::with_capacity(trajectory.horizon());
    for k in 0..trajectory.horizon() {
        let (x, u, w) = (&trajectory.x[k], &trajectory.u[k], &trajectory.w[k]);
        let mut h = problem.cost.stage_hessian(x, u, w)?;
        if !model.dynamics_affine() {
            h += model.dynamics_curvature(x, u, w, &costates.lambda[k + 1])?;
        }
        if !model.preview_affine() {
            let g = model.preview_curvature(x, w, &costates.lambda_bar[k + 1])?;
            let p = d.preview;
            let mut gv = h.view_mut((0, 0), (n, n));
            gv += g.view((0, 0), (n, n));
            let mut gv = h.view_mut((0, n + m), (n, p));
            gv += g.view((0, n), (n, p));
            let mut gv = h.view_mut((n + m, 0), (p, n));
            gv += g.view((n, 0), (p, n));
            let mut gv = h.view_mut((n + m, n + m), (p, p));
            gv += g.view((n, n), (p, p));
        }
        if !trajectory.active[k].is_empty() && !constraints.affine() {
            let weights = costates.mu_full(k, &trajectory.active[k], l);
            h += constraints.curvature(x, u, w, &weights)?;
        }
        if !all_finite(&h) {
            return Err(EneError::NonFinite {
                context: format!("Hamiltonian Hessian at step {k}"),
            });
        }
        stages.push(h);
    }
    Ok(HamiltonianBlocks { dims: d, stages })
}

/// Inverse of the control-space KKT block: `[[Z_uu, Cᵤᵃᵀ], [Cᵤᵃ, 0]]⁻¹` at
/// active steps and `Z_uu⁻¹` otherwise (the multiplier block is
/// zero-dimensional).
pub fn kmat(step: usize, z_uu: &Mat, c_u_active: &Mat) -> Result<Mat> {
    let m = z_uu.nrows();
    let la = c_u_active.nrows();
    let z = symmetrize(z_uu);
    match is_positive_definite(&z) {
        Ok(true) => {}
        Ok(false) => return Err(EneError::ZuuNotPositive { step }),
        Err(EneError::NotSymmetric { .. }) => return Err(EneError::ZuuNotPositive { step }),
        Err(e) => return Err(e),
    }
    if la > m {
        return Err(EneError::TooManyActive {
            step,
            count: la,
            control_dim: m,
        });
    }
    let mut kkt = Mat::zeros(m + la, m + la);
    kkt.view_mut((0, 0), (m, m)).copy_from(&z);
    if la > 0 {
        kkt.view_mut((0, m), (m, la)).copy_from(&c_u_active.transpose());
        kkt.view_mut((m, 0), (la, m)).copy_from(c_u_active);
    }
    inverse_symmetric(&kkt).map_err(|e| match e {
        EneError::SingularMatrix { .. } => EneError::SingularKkt { step },
        other => other,
    })
}

/// Whether the recursion carries the first-order correction terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecursionMode {
    /// The nominal is stationary: the linear value terms vanish.
    Optimal,
    /// Propagate the linear value terms driven by `H_u`.
    NonOptimal,
}

/// Whether gains see the preview channel at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainVariant {
    /// State and preview feedback.
    Extended,
    /// Classic state-only feedback: every preview coupling is zeroed before
    /// the recursion.
    StateOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiOptions {
    pub mode: RecursionMode,
    pub variant: GainVariant,
    /// Shift added to `Z_uu` before factorization (nominal solver only).
    pub regularization: f64,
    /// Include the active-constraint residual `Cᵃ` in the drive vector, so the
    /// feedforward also restores constraint feasibility.
    pub restore_constraints: bool,
}

impl RiccatiOptions {
    pub fn new(mode: RecursionMode, variant: GainVariant) -> Self {
        Self {
            mode,
            variant,
            regularization: 0.0,
            restore_constraints: false,
        }
    }
}

/// The `Z` blocks at one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZBlocks {
    pub xx: Mat,
    pub xu: Mat,
    pub xw: Mat,
    pub ux: Mat,
    pub uu: Mat,
    pub uw: Mat,
    pub wx: Mat,
    pub wu: Mat,
    pub ww: Mat,
}

/// Everything the recursion produces at one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepGains {
    pub active: Vec<usize>,
    /// Control gain on the state perturbation.
    pub k1: Mat,
    /// Control gain on the preview perturbation.
    pub k2: Mat,
    /// Control rows of `−K°`, applied to the drive vector.
    pub k3: Mat,
    /// Multiplier gain on the state perturbation.
    pub k4: Mat,
    /// Multiplier gain on the preview perturbation.
    pub k5: Mat,
    /// The KKT inverse `K°`.
    pub kkt_inverse: Mat,
    pub z: ZBlocks,
    /// `[fᵤᵀT(k+1) + H_u(k); c]`, zero in optimal mode.
    pub drive: Vector,
    /// `K₃ · drive`.
    pub feedforward: Vector,
    /// `−[0 I] K° · drive`, the multiplier shift from the drive.
    pub multiplier_feedforward: Vector,
}

/// Gains and value-function terms over the horizon.
///
/// `value_xx`, `value_xw`, `value_wx`, `value_ww` are the quadratic
/// cost-to-go blocks and `value_x`, `value_w` its linear terms; all have
/// `N+1` entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainSchedule {
    pub dims: Dims,
    pub mode: RecursionMode,
    pub variant: GainVariant,
    pub steps: Vec<StepGains>,
    pub value_xx: Vec<Mat>,
    pub value_xw: Vec<Mat>,
    pub value_wx: Vec<Mat>,
    pub value_ww: Vec<Mat>,
    pub value_x: Vec<Vector>,
    pub value_w: Vec<Vector>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// `K₁δx + K₂δw + K₃·drive`.
    pub fn control(&self, k: usize, dx: &Vector, dw: &Vector) -> Vector {
        let s = &self.steps[k];
        &s.k1 * dx + &s.k2 * dw + &s.feedforward
    }
}

/// Copies of the step derivatives with preview couplings removed when the
/// state-only variant is requested.
struct StepTerms {
    fx: Mat,
    fu: Mat,
    fw: Mat,
    gx: Mat,
    gw: Mat,
    cx: Mat,
    cu: Mat,
    cw: Mat,
    c: Vector,
}

fn step_terms(lin: &Linearization, k: usize, rows: &[usize], variant: GainVariant) -> StepTerms {
    let s = &lin.steps[k];
    let d = lin.dims;
    let mut t = StepTerms {
        fx: s.dynamics.fx.clone(),
        fu: s.dynamics.fu.clone(),
        fw: s.dynamics.fw.clone(),
        gx: s.preview.gx.clone(),
        gw: s.preview.gw.clone(),
        cx: select_rows(&s.constraints.cx, rows),
        cu: select_rows(&s.constraints.cu, rows),
        cw: select_rows(&s.constraints.cw, rows),
        c: Vector::from_iterator(rows.len(), rows.iter().map(|&i| s.constraint_values[i])),
    };
    if variant == GainVariant::StateOnly {
        t.fw = Mat::zeros(d.state, d.preview);
        t.gx = Mat::zeros(d.preview, d.state);
        t.gw = Mat::zeros(d.preview, d.preview);
        t.cw = Mat::zeros(rows.len(), d.preview);
    }
    t
}

/// Backward sweep from the terminal conditions `S(N)=ψ_xx`, `W(N)=0`,
/// `S̄(N)=0`, `W̄(N)=ψ_ww`, `T(N)=T̄(N)=0`.
pub fn riccati_backward(
    lin: &Linearization,
    blocks: &HamiltonianBlocks,
    active: &[Vec<usize>],
    costates: &CostateTrajectory,
    opts: &RiccatiOptions,
) -> Result<GainSchedule> {
    let d = lin.dims;
    let (n, m, p) = (d.state, d.control, d.preview);
    let horizon = lin.horizon();
    if blocks.horizon() != horizon || active.len() != horizon || costates.horizon() != horizon {
        return Err(EneError::DimensionMismatch(
            "linearization, Hessian blocks, active sets and costates disagree on the horizon".into(),
        ));
    }
    let state_only = opts.variant == GainVariant::StateOnly;

    let mut value_xx = vec![Mat::zeros(n, n); horizon + 1];
    let mut value_xw = vec![Mat::zeros(n, p); horizon + 1];
    let mut value_wx = vec![Mat::zeros(p, n); horizon + 1];
    let mut value_ww = vec![Mat::zeros(p, p); horizon + 1];
    let mut value_x = vec![Vector::zeros(n); horizon + 1];
    let mut value_w = vec![Vector::zeros(p); horizon + 1];
    value_xx[horizon] = lin.psi_xx();
    if !state_only {
        value_ww[horizon] = lin.psi_ww();
    }

    let mut steps: Vec<StepGains> = Vec::with_capacity(horizon);
    for k in (0..horizon).rev() {
        let rows = &active[k];
        let la = rows.len();
        let t = step_terms(lin, k, rows, opts.variant);
        let (s1, w1, sb1, wb1) = (&value_xx[k + 1], &value_xw[k + 1], &value_wx[k + 1], &value_ww[k + 1]);
        let blk = |r, c| blocks.block(k, r, c);
        let (hxw, huw, hwx, hwu, hww) = if state_only {
            (Mat::zeros(n, p), Mat::zeros(m, p), Mat::zeros(p, n), Mat::zeros(p, m), Mat::zeros(p, p))
        } else {
            (
                blk(Part::State, Part::Preview),
                blk(Part::Control, Part::Preview),
                blk(Part::Preview, Part::State),
                blk(Part::Preview, Part::Control),
                blk(Part::Preview, Part::Preview),
            )
        };
        let (fxt, fut, fwt, gxt, gwt) = (
            t.fx.transpose(),
            t.fu.transpose(),
            t.fw.transpose(),
            t.gx.transpose(),
            t.gw.transpose(),
        );

        let z = ZBlocks {
            ux: blk(Part::Control, Part::State) + &fut * s1 * &t.fx + &fut * w1 * &t.gx,
            uu: blk(Part::Control, Part::Control) + &fut * s1 * &t.fu + Mat::identity(m, m) * opts.regularization,
            uw: huw + &fut * s1 * &t.fw + &fut * w1 * &t.gw,
            xx: blk(Part::State, Part::State)
                + &fxt * s1 * &t.fx
                + &fxt * w1 * &t.gx
                + &gxt * sb1 * &t.fx
                + &gxt * wb1 * &t.gx,
            xu: blk(Part::State, Part::Control) + &fxt * s1 * &t.fu + &gxt * sb1 * &t.fu,
            xw: hxw + &fxt * s1 * &t.fw + &fxt * w1 * &t.gw + &gxt * sb1 * &t.fw + &gxt * wb1 * &t.gw,
            wx: hwx + &fwt * s1 * &t.fx + &fwt * w1 * &t.gx + &gwt * sb1 * &t.fx + &gwt * wb1 * &t.gx,
            wu: hwu + &fwt * s1 * &t.fu + &gwt * sb1 * &t.fu,
            ww: hww + &fwt * s1 * &t.fw + &fwt * w1 * &t.gw + &gwt * sb1 * &t.fw + &gwt * wb1 * &t.gw,
        };

        let kinv = kmat(k, &z.uu, &t.cu)?;
        let x_coupling = vstack(&[&z.ux, &t.cx]);
        let w_coupling = vstack(&[&z.uw, &t.cw]);
        let x_response = -(&kinv * &x_coupling);
        let w_response = -(&kinv * &w_coupling);
        let k1 = x_response.rows(0, m).into_owned();
        let k2 = w_response.rows(0, m).into_owned();
        let k4 = x_response.rows(m, la).into_owned();
        let k5 = w_response.rows(m, la).into_owned();
        let k3 = -kinv.rows(0, m).into_owned();

        let x_row = crate::numerics::hstack(&[&z.xu, &t.cx.transpose()]);
        let w_row = crate::numerics::hstack(&[&z.wu, &t.cw.transpose()]);
        value_xx[k] = &z.xx + &x_row * &x_response;
        value_xw[k] = &z.xw + &x_row * &w_response;
        value_wx[k] = &z.wx + &w_row * &x_response;
        value_ww[k] = &z.ww + &w_row * &w_response;

        let mut drive = Vector::zeros(m + la);
        if opts.mode == RecursionMode::NonOptimal {
            let top = &fut * &value_x[k + 1] + &costates.h_u[k];
            drive.rows_mut(0, m).copy_from(&top);
            if opts.restore_constraints && la > 0 {
                drive.rows_mut(m, la).copy_from(&t.c);
            }
            let response = &kinv * &drive;
            value_x[k] = &gxt * &value_w[k + 1] + &fxt * &value_x[k + 1] - &x_row * &response;
            value_w[k] = &gwt * &value_w[k + 1] + &fwt * &value_x[k + 1] - &w_row * &response;
        }
        let full_ff = -(&kinv * &drive);
        let feedforward = full_ff.rows(0, m).into_owned();
        let multiplier_feedforward = full_ff.rows(m, la).into_owned();

        for (name, mat) in [("S", &value_xx[k]), ("W", &value_xw[k]), ("K1", &k1), ("K2", &k2)] {
            if !all_finite(mat) {
                return Err(EneError::NonFinite {
                    context: format!("{name} at step {k}"),
                });
            }
        }
        steps.push(StepGains {
            active: rows.clone(),
            k1,
            k2,
            k3,
            k4,
            k5,
            kkt_inverse: kinv,
            z,
            drive,
            feedforward,
            multiplier_feedforward,
        });
    }
    steps.reverse();
    Ok(GainSchedule {
        dims: d,
        mode: opts.mode,
        variant: opts.variant,
        steps,
        value_xx,
        value_xw,
        value_wx,
        value_ww,
        value_x,
        value_w,
    })
}

/// State and preview perturbation at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationState {
    pub dx: Vector,
    pub dw: Vector,
}

impl PerturbationState {
    pub fn new(dx: Vector, dw: Vector) -> Self {
        Self { dx, dw }
    }

    pub fn zeros(d: Dims) -> Self {
        Self {
            dx: Vector::zeros(d.state),
            dw: Vector::zeros(d.preview),
        }
    }
}

/// `δu = K₁δx + K₂δw`.
pub fn ene_control(gains: &GainSchedule, k: usize, pert: &PerturbationState) -> Vector {
    let s = &gains.steps[k];
    &s.k1 * &pert.dx + &s.k2 * &pert.dw
}

/// State-only baseline `δu = K₁δx`.
pub fn ne_control(gains: &GainSchedule, k: usize, pert: &PerturbationState) -> Vector {
    &gains.steps[k].k1 * &pert.dx
}

/// Predicted perturbation sequences along the linearized system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationTrajectory {
    pub dx: Vec<Vector>,
    pub du: Vec<Vector>,
    pub dw: Vec<Vector>,
    /// Active-multiplier perturbations (empty at inactive steps).
    pub dmu: Vec<Vector>,
    /// Perturbation of every constraint row.
    pub dc: Vec<Vector>,
}

/// Roll the linearized plant forward under the schedule, starting from
/// `(dx0, dw0)`. The state-only variant holds `δw ≡ 0`.
pub fn propagate_perturbation(
    lin: &Linearization,
    gains: &GainSchedule,
    dx0: &Vector,
    dw0: &Vector,
) -> Result<PerturbationTrajectory> {
    let horizon = gains.horizon();
    let d = lin.dims;
    let state_only = gains.variant == GainVariant::StateOnly;
    let mut dx = vec![dx0.clone()];
    let mut dw = vec![if state_only { Vector::zeros(d.preview) } else { dw0.clone() }];
    let mut du = Vec::with_capacity(horizon);
    let mut dmu = Vec::with_capacity(horizon);
    let mut dc = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let s = &lin.steps[k];
        let g = &gains.steps[k];
        let u = gains.control(k, &dx[k], &dw[k]);
        dmu.push(&g.k4 * &dx[k] + &g.k5 * &dw[k] + &g.multiplier_feedforward);
        dc.push(&s.constraints.cx * &dx[k] + &s.constraints.cu * &u + &s.constraints.cw * &dw[k]);
        let (next_x, next_w) = if state_only {
            (&s.dynamics.fx * &dx[k] + &s.dynamics.fu * &u, Vector::zeros(d.preview))
        } else {
            (
                &s.dynamics.fx * &dx[k] + &s.dynamics.fu * &u + &s.dynamics.fw * &dw[k],
                &s.preview.gx * &dx[k] + &s.preview.gw * &dw[k],
            )
        };
        if !(next_x.iter().chain(next_w.iter()).all(|v| v.is_finite())) {
            return Err(EneError::NonFinite {
                context: format!("perturbation at step {}", k + 1),
            });
        }
        dx.push(next_x);
        dw.push(next_w);
        du.push(u);
    }
    Ok(PerturbationTrajectory { dx, du, dw, dmu, dc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_kmat_is_scalar_inverse() {
        let k = kmat(0, &Mat::from_element(1, 1, 2.0), &Mat::zeros(0, 1)).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert!((k[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn active_scalar_bound_kmat() {
        let k = kmat(0, &Mat::from_element(1, 1, 2.0), &Mat::from_element(1, 1, 1.0)).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -2.0]);
        assert!((k - expected).amax() < 1e-14);
    }

    #[test]
    fn duplicated_active_rows_are_singular() {
        let cu = Mat::from_row_slice(2, 2, &[1.0, 0.5, 1.0, 0.5]);
        let r = kmat(4, &Mat::identity(2, 2), &cu);
        assert!(matches!(r, Err(EneError::SingularKkt { step: 4 })));
    }

    #[test]
    fn indefinite_zuu_is_rejected() {
        let r = kmat(2, &Mat::from_element(1, 1, -1.0), &Mat::zeros(0, 1));
        assert!(matches!(r, Err(EneError::ZuuNotPositive { step: 2 })));
    }
}
